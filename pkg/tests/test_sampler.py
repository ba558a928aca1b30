import numpy as np
import pytest

from edlab.dynamics import PotentialSpec, SiteGeometry
from edlab.geometry import FoliationSchedule
from edlab.sampler import (
    AnalyticDrift,
    GridDrift,
    KernelParams,
    ParameterError,
    WalkerEnsemble,
    empirical_density,
    l1_distance,
    maxent_kernel_check,
    moment_convergence,
    relative_entropy,
    sample_from_state,
    sample_step,
    sampler_vs_pde,
    step_moments,
)
from edlab.statespace import ConfigGrid, Constants, gaussian_state


def test_kernel_parameters_validate():
    with pytest.raises(ParameterError):
        KernelParams(0.0, [0.1], [1.0])
    with pytest.raises(ParameterError):
        KernelParams(1.0, [-0.1], [1.0])
    with pytest.raises(ParameterError):
        KernelParams(1.0, [0.1], [0.0])
    p = KernelParams(2.0, [0.5, 0.25], 1.0)
    np.testing.assert_allclose(p.alpha, [1.0, 2.0])
    assert p.alpha_prime == 1.0


def test_step_moments_scale_with_proper_time():
    p = KernelParams(1.5, [0.2, 0.1], [2.0, 1.0])
    mean, var = step_moments([1.0, -3.0], p)
    np.testing.assert_allclose(var, [0.15, 0.15])
    np.testing.assert_allclose(mean, [0.15, -0.45])


def test_sample_step_is_reproducible_and_advances_counter():
    ens = WalkerEnsemble(np.zeros((100, 2)), seed=5)
    drift = AnalyticDrift(lambda chi: -chi)
    p = KernelParams(1.0, [0.01, 0.01], 1.0)
    a = sample_step(ens, drift, p)
    b = sample_step(ens, drift, p)
    np.testing.assert_array_equal(a.walkers, b.walkers)
    assert a.counter == 1
    c = sample_step(a, drift, p)
    assert not np.array_equal(c.walkers - a.walkers, a.walkers - ens.walkers)


def test_sample_step_checks_site_count():
    ens = WalkerEnsemble(np.zeros((10, 2)), seed=0)
    with pytest.raises(ParameterError):
        sample_step(ens, AnalyticDrift(lambda c: c), KernelParams(1.0, [0.1, 0.1, 0.1], 1.0))


def test_moment_error_falls_as_inverse_root_count():
    p = KernelParams(1.0, [0.01], 1.0)
    errors, slope = moment_convergence([2.0], p, [1000, 4000, 16000, 64000], seed=1)
    assert errors[-1] < errors[0]
    assert abs(slope + 0.5) < 0.1


def test_empirical_density_is_normalized():
    grid = ConfigGrid(1, 6.0, 64)
    s = gaussian_state(grid, 0.0, 1.0)
    ens = sample_from_state(s, 50_000, seed=2)
    rho = empirical_density(ens, grid)
    assert grid.integrate(rho) == pytest.approx(1.0)
    assert l1_distance(rho, s.rho, grid) < 0.05


def test_walkers_outside_box_are_reported(caplog):
    grid = ConfigGrid(1, 1.0, 16)
    ens = WalkerEnsemble(np.array([[0.0], [5.0]]), seed=0)
    with caplog.at_level("WARNING"):
        rho = empirical_density(ens, grid)
    assert "outside the box" in caplog.text
    assert grid.integrate(rho) == pytest.approx(1.0)


def test_grid_drift_matches_linear_phase():
    grid = ConfigGrid(1, 6.0, 64)
    s = gaussian_state(grid, 0.0, 1.0, momentum=0.7)
    c = Constants(eta=1.0, lam=0.0)
    chi = np.array([[-0.5], [0.0], [0.8]])
    # phi = Phi/eta + log sqrt(rho) = 0.7 chi - chi^2/4 + const
    np.testing.assert_allclose(GridDrift(s, c)(chi)[:, 0], 0.7 - 0.5 * chi[:, 0], atol=5e-3)


def test_walker_csv(tmp_path):
    ens = WalkerEnsemble(np.arange(6.0).reshape(3, 2), seed=0)
    ens.to_csv(tmp_path / "w.csv")
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == "walker,chi0,chi1"
    assert lines[2] == "1,2.0,3.0"


def test_sampler_tracks_pde_briefly():
    grid = ConfigGrid(1, 8.0, 64)
    s = gaussian_state(grid, 0.3, 1.0, 0.5)
    sched = FoliationSchedule.uniform([1.0], [0.0], 1e-3, 20)
    rep = sampler_vs_pde(s, sched, 40_000, Constants(), SiteGeometry.flat(1), PotentialSpec.of_mass(1.0), seed=3)
    assert len(rep.rows) == 21
    assert rep.l1[-1] < 0.03
    again = sampler_vs_pde(s, sched, 40_000, Constants(), SiteGeometry.flat(1), PotentialSpec.of_mass(1.0), seed=3)
    np.testing.assert_array_equal(rep.l1, again.l1)


def test_sampler_rejects_shift():
    grid = ConfigGrid(1, 8.0, 32)
    sched = FoliationSchedule.uniform([1.0], [0.5], 1e-3, 2)
    with pytest.raises(ParameterError, match="zero shift"):
        sampler_vs_pde(gaussian_state(grid), sched, 100, Constants(), SiteGeometry.flat(1), PotentialSpec.zero())


@pytest.mark.parametrize("kappa,g", [(0.01, 0.0), (0.01, 2.0), (0.01, -30.0), (1.0, 0.3)])
def test_maxent_recovers_closed_form(kappa, g):
    u = kappa if g == 0 else (-1 + np.sqrt(1 + 4 * g * g * kappa)) / (2 * g * g)
    r = maxent_kernel_check(kappa, g)
    assert r.mean == pytest.approx(g * u, abs=1e-9)
    assert r.variance == pytest.approx(u, rel=1e-9)
    assert r.alpha == pytest.approx(1.0 / u, rel=1e-8)
    if g:
        # the start point alpha = 1/kappa is exact only without drift
        assert r.alpha_prime == pytest.approx(1.0, rel=1e-8)
        assert r.iterations > 1
    assert r.is_maximizer
    assert min(r.perturbation_gaps) > 0


def test_maxent_rejects_nonpositive_kappa():
    with pytest.raises(ParameterError):
        maxent_kernel_check(0.0, 1.0)


def test_relative_entropy_of_uniform_is_zero():
    assert relative_entropy(np.full(10, 0.1)) == pytest.approx(0.0, abs=1e-15)
    assert relative_entropy(np.array([1.0, 0.0])) < 0
