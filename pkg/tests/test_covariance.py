import numpy as np
import pytest

from edlab.covariance import (
    _ORDERS,
    _symbolic,
    TestState,
    coefficient_ode_residuals,
    constraint_residual,
    default_field_sites,
    default_scan_grid,
    fitted_order,
    lattice_derivative,
    path_check_state,
    seam_window,
    sinusoidal_lapses,
    smeared_algebra_check,
    test_battery as make_battery,
    two_path_test,
    uniqueness_scan,
)
from edlab.dynamics import CandidateCoefficients, PotentialSpec
from edlab.geometry import Hypersurface, SpacetimeBackground
from edlab.statespace import ConfigGrid, Constants

QUANTUM = Constants.from_hbar(1.0)
MASS = PotentialSpec.of_mass(1.0)


def test_fitted_order_recovers_power_law():
    eps = [1e-2, 5e-3, 2.5e-3]
    assert fitted_order(eps, [3.0 * e**3 for e in eps]) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        fitted_order(eps[:2], [1.0, 2.0])
    with pytest.raises(ValueError):
        fitted_order(eps, [1.0, np.nan, 1.0])


def test_field_sites_and_window():
    np.testing.assert_array_equal(default_field_sites(16, 2), [6, 10])
    np.testing.assert_array_equal(default_field_sites(16, 1), [8])
    w = seam_window(16)
    assert w[0] == 0 and w[1] == 0 and w[15] == 0
    assert w.max() <= 1.0 and w[8] == pytest.approx(1.0, abs=0.05)
    xi, eta = sinusoidal_lapses(16)
    assert np.all(xi.normal_comp > 0) and np.all(eta.normal_comp > 0)
    assert not np.allclose(xi.normal_comp, xi.normal_comp[0])


def test_lattice_derivative():
    np.testing.assert_allclose(lattice_derivative([0.0, 1.0, 2.0, 1.0]), [0.0, 1.0, 0.0, -1.0])
    np.testing.assert_array_equal(lattice_derivative([1.0, 2.0]), 0.0)


# --- constraint residual -------------------------------------------------


def _numeric_residual(ts: TestState, cand: CandidateCoefficients, k: int, h: float = 1e-3) -> float:
    """Residual at battery point ``k`` by central differences of the closed-form state."""
    fam_rho, fam_phi, _ = _symbolic()
    pr, pp = ts.params["rho"].values(), ts.params["phi"].values()
    idx = {o: i for i, o in enumerate(_ORDERS)}

    def parts(a, b):
        return fam_rho(a, b, *pr), fam_phi(a, b, *pp)

    def M(a, b, axis):
        r, p = parts(a, b)
        d1, d2 = ((1, 0), (2, 0)) if axis == 0 else ((0, 1), (0, 2))
        rho, r1, r2 = r[0], r[idx[d1]], r[idx[d2]]
        p1, p2 = p[idx[d1]], p[idx[d2]]
        return (cand.f1_scale / rho * r2 + cand.f2 * p2 + cand.h0 * p1**2 + cand.h1 * r1 * p1
                + cand.h2_scale / rho**2 * r1**2)

    def flux(a, b, along, of):
        e = np.array([h, 0.0]) if along == 0 else np.array([0.0, h])
        dm = (M(a + e[0], b + e[1], of) - M(a - e[0], b - e[1], of)) / (2 * h)
        return parts(a, b)[0][0] * dm

    a, b = ts.params["points"][k]
    left = (flux(a + h, b, 0, 1) - flux(a - h, b, 0, 1)) / (2 * h)
    right = (flux(a, b + h, 1, 0) - flux(a, b - h, 1, 0)) / (2 * h)
    return float(left - right)


@pytest.mark.parametrize("coeffs", [(0.0, 0.1, 0.0, 0.0, 0.0), (0.0, 0.0, 0.1, 0.0, 0.0),
                                    (0.0, 0.0, 0.0, 0.1, 0.0), (0.3, 0.0, 0.0, 0.0, 0.2)])
def test_symbolic_residual_matches_finite_differences(coeffs):
    ts = TestState.random(3)
    cand = CandidateCoefficients(*coeffs)
    exact = (np.array(coeffs) @ ts.basis_residuals())
    for k in range(4):
        assert _numeric_residual(ts, cand, k) == pytest.approx(exact[k], rel=1e-4, abs=1e-7)


@pytest.mark.parametrize("c", [1.0, -1.0, 0.5, -0.5, 0.0])
def test_canonical_family_closes(c):
    for ts in make_battery(5, seed=10):
        assert constraint_residual(CandidateCoefficients.canonical(c, MASS), ts) <= 1e-8


def test_residual_is_antisymmetric_in_site_pair():
    ts = TestState.random(1)
    cand = CandidateCoefficients(0.2, 0.1, -0.3, 0.05, 0.4)
    assert constraint_residual(cand, ts, (0, 1)) == constraint_residual(cand, ts, (1, 0))
    np.testing.assert_array_equal(ts.basis_residuals(1, 0), -ts.basis_residuals(0, 1))
    with pytest.raises(ValueError):
        constraint_residual(cand, ts, (1, 1))


def test_potential_drops_out_of_residual():
    ts = TestState.random(2)
    a = CandidateCoefficients(0.5, 0.1, 0.0, 0.0, -0.25, PotentialSpec.zero())
    b = CandidateCoefficients(0.5, 0.1, 0.0, 0.0, -0.25, PotentialSpec.polynomial([0, 0, 3.0, 1.0, 2.0]))
    assert constraint_residual(a, ts) == constraint_residual(b, ts)


def test_test_states_are_seeded():
    a, b = TestState.random(4), TestState.random(4)
    np.testing.assert_array_equal(a.basis_residuals(), b.basis_residuals())
    assert not np.array_equal(a.basis_residuals(), TestState.random(5).basis_residuals())


def test_coefficient_odes():
    rho = np.linspace(0.1, 2.0, 20)
    ode = coefficient_ode_residuals(lambda p: 0.7 / p, lambda p: -0.35 / p**2, rho)
    assert max(ode) < 1e-12
    bad = coefficient_ode_residuals(lambda p: 0.7 / p + 0.1, lambda p: -0.35 / p**2, rho)
    assert bad[0] > 1e-3


def test_scan_finds_exactly_the_canonical_line():
    reports = uniqueness_scan(battery=make_battery(6, seed=0))
    assert len(reports) == len(default_scan_grid()) == 200
    closing = {(r.candidate.f1_scale, r.candidate.h2_scale) for r in reports if r.verdict == "closes"}
    assert closing == {(c, -0.5 * c) for c in (-1.0, -0.5, 0.0, 0.5, 1.0)}
    for r in reports:
        assert (r.verdict == "closes") == r.canonical
        assert r.as_dict()["verdict"] == r.verdict


# --- two-path and smeared algebra ----------------------------------------


def test_two_path_quantum_is_third_order():
    grid = ConfigGrid(2, 6.0, 32)
    surface = Hypersurface.flat(16)
    xi, eta = sinusoidal_lapses(16)
    rep = two_path_test(path_check_state(grid), surface, SpacetimeBackground.minkowski(), xi, eta,
                        [1e-2, 5e-3, 2.5e-3], MASS, QUANTUM)
    assert rep.fitted_order >= 2.5
    assert rep.as_dict()["fitted_order"] == rep.fitted_order
    assert len(rep.rows()) == 3


def test_two_path_broken_candidate_is_second_order():
    grid = ConfigGrid(2, 6.0, 32)
    xi, eta = sinusoidal_lapses(16)
    cand = CandidateCoefficients(-2 * QUANTUM.lam, 0.0, 0.1, 0.0, QUANTUM.lam, MASS)
    rep = two_path_test(path_check_state(grid), Hypersurface.flat(16), SpacetimeBackground.minkowski(), xi, eta,
                        [1e-2, 5e-3, 2.5e-3], MASS, QUANTUM, candidate=cand)
    assert rep.fitted_order <= 2.2


@pytest.fixture(scope="module")
def algebra_setup():
    grid = ConfigGrid(2, 6.0, 32)
    return path_check_state(grid), Hypersurface.flat(16), default_field_sites(16, 2)


def test_smeared_algebra_quantum_closes(algebra_setup):
    state, surface, sites = algebra_setup
    f, g = np.array([1.2, 0.8]), np.array([0.3, 0.6])
    r = smeared_algebra_check(state, surface, SpacetimeBackground.minkowski(), f, g, MASS, QUANTUM, field_sites=sites)
    assert r.perp_perp <= 1e-8
    assert r.tan_tan <= 1e-5
    assert r.tan_perp <= 1e-5
    probe = smeared_algebra_check(state, surface, SpacetimeBackground.minkowski(), f, g, MASS, QUANTUM,
                                  field_sites=sites, lam_hj=1.1 * QUANTUM.lam)
    assert probe.perp_perp >= 10 * max(r.perp_perp, 1e-8)


def test_smeared_algebra_constant_smearing(algebra_setup):
    state, surface, sites = algebra_setup
    r = smeared_algebra_check(state, surface, SpacetimeBackground.minkowski(), np.ones(2), np.zeros(2), MASS,
                              QUANTUM, f2=2 * np.ones(2), field_sites=sites)
    assert r.values["rhs_perp_perp"] == 0.0
    assert r.perp_perp <= 1e-8
