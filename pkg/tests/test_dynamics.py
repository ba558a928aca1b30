import math

import numpy as np
import pytest

from conftest import smooth_state
from edlab.dynamics import (
    CandidateCoefficients,
    PotentialSpec,
    SchrodingerStepper,
    SiteGeometry,
    StepError,
    e_gradient,
    e_hamiltonian,
    evolve,
    face_kinetic,
    face_velocity,
    flat_fp_rhs,
    lthj_rhs,
    ltfp_rhs,
    schrodinger_step,
    stability_bound,
    step,
    substeps_for,
    total_energy,
    wave_energy,
)
from edlab.geometry import FoliationSchedule
from edlab.statespace import ConfigGrid, Constants, WaveState, gaussian_state, to_wave

QUANTUM = Constants.from_hbar(1.0)
HYBRID = Constants()
MASS = PotentialSpec.of_mass(1.0)


def test_potential_kinds():
    chi = np.array([0.0, 1.0, 2.0])
    np.testing.assert_allclose(PotentialSpec.of_mass(2.0)(chi), 2.0 * chi**2)
    # coefficients are Taylor coefficients: c_n chi^n / n!
    np.testing.assert_allclose(PotentialSpec.polynomial([1.0, 0.0, 2.0, 6.0])(chi), 1 + chi**2 + chi**3)
    np.testing.assert_allclose(PotentialSpec.zero()(chi), 0.0)
    with pytest.raises(ValueError):
        PotentialSpec("quartic")


def test_trigonometric_faces_agree_with_plain_faces_to_second_order():
    gaps = []
    for m in (50, 100):
        h = 1.0 / m
        phi = 0.3 * np.linspace(0, 1, m) ** 2
        plain = face_kinetic(phi, 0, h)
        trig = face_kinetic(phi, 0, h, lam=0.125)
        gaps.append(np.max(np.abs(trig - plain)) / plain.max())
        np.testing.assert_allclose(face_velocity(phi, 0, h, 0.125), face_velocity(phi, 0, h), rtol=1e-4)
    assert gaps[0] < 2e-5
    assert 3.5 < gaps[0] / gaps[1] < 4.5


@pytest.mark.parametrize("n", [1, 2, 3])
def test_site_assembly_matches_flat_form(n):
    grid = ConfigGrid(n, 4.0, 16)
    s = smooth_state(grid, n)
    geom = SiteGeometry.flat(n)
    for lam in (0.0, 0.125):
        total = sum(ltfp_rhs(s, geom, x, lam) for x in range(n))
        np.testing.assert_allclose(total, flat_fp_rhs(s, lam), atol=1e-12, rtol=0)


def test_continuity_conserves_mass():
    grid = ConfigGrid(2, 4.0, 20)
    s = smooth_state(grid, 3)
    geom = SiteGeometry(np.array([1.2, 0.7]), np.array([0.5, 2.0]))
    for x in range(2):
        assert abs(grid.integrate(ltfp_rhs(s, geom, x, 0.125))) < 1e-13


@pytest.mark.parametrize("constants", [HYBRID, QUANTUM], ids=["hybrid", "quantum"])
def test_generators_are_hamiltonian(constants):
    grid = ConfigGrid(1, 3.0, 20)
    s = smooth_state(grid, 7)
    geom = SiteGeometry(np.array([1.3]), np.array([0.7]))
    V = PotentialSpec.polynomial([0.0, 0.2, 1.0, 0.3])

    def H(st):
        return e_hamiltonian(st, geom, V, constants, 0)

    np.testing.assert_allclose(e_gradient(H, s, "phi"), ltfp_rhs(s, geom, 0, constants.lam), atol=1e-6)
    np.testing.assert_allclose(e_gradient(H, s, "rho"), -lthj_rhs(s, geom, V, constants, 0), atol=1e-6)


def test_canonical_candidate_reproduces_quantum_generator():
    grid = ConfigGrid(2, 4.0, 20)
    s = smooth_state(grid, 4)
    geom = SiteGeometry.flat(2)
    cand = CandidateCoefficients.from_constants(QUANTUM, MASS)
    assert cand.remainder().is_zero
    for x in range(2):
        np.testing.assert_allclose(
            lthj_rhs(s, geom, MASS, QUANTUM, x, cand), lthj_rhs(s, geom, MASS, QUANTUM, x), atol=1e-12
        )


def test_candidate_remainder_enters_hamilton_jacobi():
    grid = ConfigGrid(1, 4.0, 32)
    s = smooth_state(grid, 5)
    geom = SiteGeometry.flat(1)
    base = CandidateCoefficients.from_constants(QUANTUM, MASS)
    bent = CandidateCoefficients(base.f1_scale, 0.1, 0.0, 0.0, base.h2_scale, MASS)
    assert not np.allclose(lthj_rhs(s, geom, MASS, QUANTUM, 0, bent), lthj_rhs(s, geom, MASS, QUANTUM, 0, base))


def test_candidate_rejects_nonfinite():
    with pytest.raises(ValueError):
        CandidateCoefficients(math.inf)


def test_step_conserves_norm_and_rejects_large_steps():
    grid = ConfigGrid(1, 8.0, 128)
    s = gaussian_state(grid, 0.5, 1.0, 0.3)
    geom = SiteGeometry.flat(1)
    out = step(s, geom, [1.0], None, 1e-3, MASS, QUANTUM)
    assert abs(out.norm - s.norm) < 1e-12
    bound = stability_bound(grid, geom, QUANTUM, s)
    with pytest.raises(StepError, match="stability bound"):
        step(s, geom, [1.0], None, 2 * bound, MASS, QUANTUM)
    assert substeps_for(grid, geom, QUANTUM, s, [1.0], None, 2 * bound) >= 2


def test_zero_lapse_step_is_identity():
    s = gaussian_state(ConfigGrid(1, 5.0, 32))
    assert step(s, SiteGeometry.flat(1), [0.0], None, 0.1, MASS, HYBRID) is s


def test_evolve_zero_length_schedule_reports_initial_row():
    s = gaussian_state(ConfigGrid(1, 6.0, 64), 0.2)
    traj = evolve(s, FoliationSchedule(), "pde", SiteGeometry.flat(1), MASS, HYBRID)
    assert traj.final is s
    assert len(traj.rows) == 1
    assert traj.rows[0][2] == pytest.approx(1.0)


def test_trajectory_csv_columns(tmp_path):
    s = gaussian_state(ConfigGrid(1, 6.0, 64))
    traj = evolve(s, FoliationSchedule.uniform([1.0], [0.0], 1e-3, 3), "pde", SiteGeometry.flat(1), MASS, HYBRID)
    traj.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,tau,norm,energy,min_rho,max_defect"
    assert len(lines) == 5


def test_hybrid_energy_is_conserved_short_run():
    grid = ConfigGrid(1, 8.0, 128)
    s = gaussian_state(grid, 0.5, 1.0, 0.3)
    geom = SiteGeometry.flat(1)
    e0 = total_energy(s, geom, MASS, HYBRID)
    for _ in range(50):
        s = step(s, geom, [1.0], None, 1e-3, MASS, HYBRID)
    assert abs(total_energy(s, geom, MASS, HYBRID) - e0) < 1e-7


def test_contracting_classical_ensemble_stays_smooth():
    # a harmonic trap focuses the ensemble; the rim must not seed grid noise
    grid = ConfigGrid(1, 8.0, 512)
    s = gaussian_state(grid, 0.5, 1.0, 0.3)
    geom = SiteGeometry.flat(1)
    e0 = total_energy(s, geom, MASS, HYBRID)
    for _ in range(1000):
        s = step(s, geom, [1.0], None, 1e-3, MASS, HYBRID)
    assert abs(total_energy(s, geom, MASS, HYBRID) - e0) < 1e-10
    # where the characteristics start inside the box the velocity is exact:
    # v = -tan(t) (x - 0.3 sin t) + 0.3 cos t
    xf = grid.axis[:-1] + 0.5 * grid.h
    v = np.diff(s.phi_big) / grid.h
    exact = -math.tan(1.0) * (xf - 0.3 * math.sin(1.0)) + 0.3 * math.cos(1.0)
    inner = np.abs(xf) < 3.0
    assert np.max(np.abs(v - exact)[inner]) < 1e-8


def test_schrodinger_step_is_unitary_and_linear():
    grid = ConfigGrid(2, 5.0, 24)
    geom = SiteGeometry(np.array([1.0, 1.3]), np.array([1.0, 0.6]))
    rng = np.random.default_rng(0)
    a = WaveState(grid, rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape))
    b = WaveState(grid, rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape))
    stepper = SchrodingerStepper(grid, geom, MASS, QUANTUM, np.array([1.0, 0.5]), 1e-2)
    sa, sb = stepper.step(a), stepper.step(b)
    assert abs(sa.norm - a.norm) < 1e-12 * a.norm
    combo = stepper.step(WaveState(grid, 2.0 * a.psi - 0.5j * b.psi))
    np.testing.assert_allclose(combo.psi, 2.0 * sa.psi - 0.5j * sb.psi, atol=1e-10)
    e0 = wave_energy(a, geom, MASS, QUANTUM, [1.0, 0.5])
    assert wave_energy(sa, geom, MASS, QUANTUM, [1.0, 0.5]) == pytest.approx(e0, rel=1e-12)


def test_schrodinger_zero_lapse_and_hybrid_rejection():
    grid = ConfigGrid(1, 5.0, 32)
    w = to_wave(gaussian_state(grid), QUANTUM)
    assert schrodinger_step(w, SiteGeometry.flat(1), MASS, QUANTUM, [0.0], 0.1) is w
    from edlab.dynamics import NumericalError

    with pytest.raises(NumericalError):
        SchrodingerStepper(grid, SiteGeometry.flat(1), MASS, HYBRID, np.ones(1), 0.1)


def test_pde_tracks_wave_for_short_time():
    grid = ConfigGrid(1, 8.0, 128)
    s = gaussian_state(grid, 1.0, np.sqrt(0.5))
    geom = SiteGeometry.flat(1)
    sched = FoliationSchedule.uniform([1.0], [0.0], 2e-3, 50)
    pde = evolve(s, sched, "pde", geom, MASS, QUANTUM)
    wave = evolve(to_wave(s, QUANTUM), sched, "wave", geom, MASS, QUANTUM)
    assert np.max(np.abs(pde.final.rho - np.abs(wave.final.psi) ** 2)) < 1e-3
