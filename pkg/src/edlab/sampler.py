"""Walker realization of the Gaussian transition kernel.

Each walker is one field configuration.  A step of duration ``dxi_perp``
moves site ``x`` by a Gaussian increment with mean
``eta dxi dphi/dchi_x / sqrt(g_x)`` and variance ``eta dxi / sqrt(g_x)``,
where ``phi = Phi/eta + log sqrt(rho)`` is the drift potential.  Normals come
from a counter-based hash keyed on ``(seed, walker, step, site)``, so a seeded
run gives the same walkers for any thread count or backend split.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .dynamics import SiteGeometry, step as pde_step, substeps_for
from .statespace import ConfigGrid, Constants, EnsembleState, drift_potential

log = logging.getLogger(__name__)


class ParameterError(ValueError):
    pass


class OptimizationError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class WalkerEnsemble:
    """``M`` walkers of ``n_sites`` values each, plus the RNG key and step counter."""

    walkers: np.ndarray = field(repr=False)
    seed: int = 0
    counter: int = 0

    def __post_init__(self):
        w = np.asarray(self.walkers, dtype=float)
        if w.ndim != 2:
            raise ParameterError("walkers must be a (count, n_sites) array")
        if not np.all(np.isfinite(w)):
            raise ParameterError("walker values must be finite")
        object.__setattr__(self, "walkers", w)
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    @property
    def count(self) -> int:
        return self.walkers.shape[0]

    @property
    def n_sites(self) -> int:
        return self.walkers.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["walker"] + [f"chi{k}" for k in range(self.n_sites)])
            for i, row in enumerate(self.walkers):
                w.writerow([i] + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class KernelParams:
    eta: float
    dxi_perp: np.ndarray
    sqrt_g: np.ndarray

    def __post_init__(self):
        dxi = np.atleast_1d(np.asarray(self.dxi_perp, dtype=float))
        sg = np.broadcast_to(np.asarray(self.sqrt_g, dtype=float), dxi.shape).copy()
        if not self.eta > 0:
            raise ParameterError("eta must be positive")
        if not np.all(dxi > 0):
            raise ParameterError("dxi_perp must be positive at every site")
        if not np.all(sg > 0):
            raise ParameterError("sqrt_g must be positive at every site")
        object.__setattr__(self, "dxi_perp", dxi)
        object.__setattr__(self, "sqrt_g", sg)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 / (self.eta * self.dxi_perp)

    @property
    def alpha_prime(self) -> float:
        return 1.0

    @classmethod
    def from_lapse(cls, eta: float, lapse, dtau: float, geom: SiteGeometry) -> "KernelParams":
        return cls(eta, np.asarray(lapse, float) * dtau, geom.sqrt_g)


def step_moments(drift_grad, params: KernelParams):
    """Per-site mean and variance of one increment (sites are uncorrelated)."""
    scale = params.eta * params.dxi_perp / params.sqrt_g
    mean = scale * np.asarray(drift_grad, dtype=float)
    var = np.broadcast_to(scale, mean.shape).copy()
    return mean, var


# ---------------------------------------------------------------------------
# drift fields


class AnalyticDrift:
    """Drift from a callable returning ``dphi/dchi`` with shape ``(M, n)`` for walkers ``(M, n)``."""

    def __init__(self, gradient):
        self._gradient = gradient

    def __call__(self, chi: np.ndarray) -> np.ndarray:
        return np.asarray(self._gradient(chi), dtype=float)


class GridDrift:
    """Drift interpolated from the grid values of ``phi`` for an ensemble state.

    Gradients are centered in the interior and one-sided at the walls, then
    interpolated multilinearly; walkers outside the box see the wall value.
    """

    def __init__(self, state: EnsembleState, constants: Constants, backend=None):
        grid = state.grid
        phi = drift_potential(state, constants)
        axes = list(range(grid.n_sites))
        grads = np.gradient(phi, grid.h, axis=axes)
        if grid.n_sites == 1:
            grads = [grads]
        self.grid = grid
        self.fields = np.stack(grads)
        self.backend = backend

    def __call__(self, chi: np.ndarray) -> np.ndarray:
        return kernels.interp_fields(chi, self.fields, self.grid.L, self.grid.m, self.backend)


def sample_step(ensemble: WalkerEnsemble, drift, params: KernelParams, backend=None) -> WalkerEnsemble:
    """Advance every walker by one Euler-Maruyama step of the transition kernel."""
    if params.dxi_perp.size not in (1, ensemble.n_sites):
        raise ParameterError("kernel parameters do not match the walker site count")
    grad = drift(ensemble.walkers)
    mean, var = step_moments(grad, params)
    z = kernels.normals(ensemble.seed, ensemble.counter, 0, ensemble.count, ensemble.n_sites, backend)
    return replace(ensemble, walkers=ensemble.walkers + mean + np.sqrt(var) * z, counter=ensemble.counter + 1)


def empirical_density(ensemble: WalkerEnsemble, grid: ConfigGrid, backend=None) -> np.ndarray:
    """Nearest-node histogram scaled so that ``sum * h**n == 1``."""
    if ensemble.n_sites != grid.n_sites:
        raise ParameterError("walker and grid site counts differ")
    outside = int(np.count_nonzero(np.any(np.abs(ensemble.walkers) > grid.L + 0.5 * grid.h, axis=1)))
    if outside:
        log.warning("%d walkers outside the box were counted in the nearest boundary cell", outside)
    counts = kernels.histogram(ensemble.walkers, grid.L, grid.m, backend)
    return counts / (ensemble.count * grid.cell)


def sample_from_state(state: EnsembleState, count: int, seed: int) -> WalkerEnsemble:
    """Draw walkers from the grid density: a node by its mass, then uniform within its cell."""
    grid = state.grid
    rng = np.random.Generator(np.random.PCG64(seed))
    p = np.maximum(state.rho, 0.0).ravel()
    p = p / p.sum()
    flat = rng.choice(p.size, size=count, p=p)
    idx = np.stack(np.unravel_index(flat, grid.shape), axis=1)
    jitter = rng.uniform(-0.5, 0.5, size=idx.shape) * grid.h
    chi = np.clip(grid.axis[idx] + jitter, -grid.L, grid.L)
    return WalkerEnsemble(chi, seed=seed)


# ---------------------------------------------------------------------------
# MaxEnt kernel


@dataclass
class MaxEntResult:
    delta: np.ndarray = field(repr=False)
    prob: np.ndarray = field(repr=False)
    alpha: float
    alpha_prime: float
    mean: float
    variance: float
    entropy: float
    iterations: int
    residual: float
    perturbation_gaps: list = field(default_factory=list)

    @property
    def is_maximizer(self) -> bool:
        return all(g >= 0 for g in self.perturbation_gaps)


def _features(delta, drift_grad):
    return np.stack([-0.5 * delta * delta, drift_grad * delta])


def relative_entropy(p: np.ndarray) -> float:
    """Entropy of masses ``p`` relative to the uniform prior on the same grid."""
    q = 1.0 / p.size
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz] / q)))


def maxent_kernel_check(kappa: float, drift_grad: float, kappa_prime: float | None = None,
                        n_points: int = 4001, seed: int = 0, n_perturbations: int = 10) -> MaxEntResult:
    """Maximize entropy on a bounded ``Delta`` grid under the two kernel constraints.

    Constraints are ``<Delta**2> = kappa`` and ``<drift_grad Delta> = kappa_prime``.
    When ``kappa_prime`` is omitted it takes the value for which the optimal
    ``alpha_prime`` is one.  The multipliers come from damped Newton steps on
    the dual.  The optimum is then compared against ``n_perturbations``
    random perturbations that keep the constraints.
    """
    if not kappa > 0:
        raise ParameterError("kappa must be positive")
    g = float(drift_grad)
    if g == 0.0:
        u = kappa
    else:
        u = (-1.0 + math.sqrt(1.0 + 4.0 * g * g * kappa)) / (2.0 * g * g)
    if kappa_prime is None:
        kappa_prime = g * g * u
    mean_guess = g * u
    width = 14.0 * math.sqrt(kappa) + abs(mean_guess)
    delta = np.linspace(mean_guess - width, mean_guess + width, n_points)
    F = _features(delta, g)
    target = np.array([-0.5 * kappa, kappa_prime])
    active = [0] if g == 0.0 else [0, 1]
    lam = np.array([1.0 / kappa, 0.0 if g else 1.0])

    def dist(l):
        e = l @ F
        e = e - e.max()
        w = np.exp(e)
        return w / w.sum()

    def dual(l):
        e = l @ F
        emax = e.max()
        return emax + math.log(np.sum(np.exp(e - emax))) - float(l @ target)

    residual = math.inf
    for it in range(1, 101):
        p = dist(lam)
        mom = F @ p
        grad = (mom - target)[active]
        scale = np.array([0.5 * kappa, max(abs(kappa_prime), 1e-300)])[active]
        residual = float(np.max(np.abs(grad) / scale))
        if residual < 1e-13:
            break
        Fa = F[active] - mom[active, None]
        H = (Fa * p) @ Fa.T
        dl = -np.linalg.solve(H, grad)
        t, d0 = 1.0, dual(lam)
        while t > 1e-8:
            trial = lam.copy()
            trial[active] += t * dl
            if dual(trial) <= d0 + 1e-4 * t * float(grad @ dl):
                break
            t *= 0.5
        lam[active] += t * dl
    else:
        raise OptimizationError("MaxEnt Newton iteration did not converge in 100 iterations", residual)

    p = dist(lam)
    mean = float(delta @ p)
    var = float(((delta - mean) ** 2) @ p)
    S = relative_entropy(p)

    # constraint-preserving perturbations v = p w with sum v {1, Delta, Delta**2} = 0
    rng = np.random.Generator(np.random.PCG64(seed))
    A = np.stack([np.ones_like(delta), delta, delta * delta])
    G = (A * p) @ A.T
    gaps = []
    for _ in range(n_perturbations):
        w = rng.standard_normal(delta.size)
        w -= A.T @ np.linalg.solve(G, (A * p) @ w)
        v = p * w * (0.1 / np.max(np.abs(w)))
        gaps.append(S - relative_entropy(p + v))
    return MaxEntResult(delta, p, float(lam[0]), float(lam[1]), mean, var, S, it, residual, gaps)


# ---------------------------------------------------------------------------
# sampler against the grid solution


@dataclass
class SamplerReport:
    rows: list = field(default_factory=list)
    final_walkers: WalkerEnsemble | None = None
    final_state: EnsembleState | None = None

    COLUMNS = ("step", "tau", "l1")

    @property
    def l1(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for k, tau, l1 in self.rows:
                w.writerow([k, repr(float(tau)), repr(float(l1))])


def l1_distance(a: np.ndarray, b: np.ndarray, grid: ConfigGrid) -> float:
    return float(np.sum(np.abs(a - b)) * grid.cell)


def sampler_vs_pde(initial: EnsembleState, schedule, count: int, constants: Constants, geom: SiteGeometry,
                   potential, seed: int = 0, backend=None) -> SamplerReport:
    """Co-evolve walkers and the grid solution; one L1 row per schedule step.

    Walkers take one kernel step per schedule entry with ``dxi_perp = N dtau``
    and drift from the grid state at the start of the step.  The grid state
    takes as many stable substeps as the entry needs.
    """
    grid = initial.grid
    ens = sample_from_state(initial, count, seed)
    state = initial
    tau = 0.0
    report = SamplerReport()
    report.rows.append((0, tau, l1_distance(empirical_density(ens, grid, backend), state.rho, grid)))
    for k, (lapse, shift, dtau) in enumerate(schedule, start=1):
        lapse = np.asarray(lapse, float)
        if shift is not None and np.any(shift):
            raise ParameterError("the walker comparison supports zero shift only")
        params = KernelParams.from_lapse(constants.eta, lapse, dtau, geom)
        ens = sample_step(ens, GridDrift(state, constants, backend), params, backend)
        nsub = substeps_for(grid, geom, constants, state, lapse, None, dtau)
        for _ in range(nsub):
            state = pde_step(state, geom, lapse, None, dtau / nsub, potential, constants)
        tau += dtau
        report.rows.append((k, tau, l1_distance(empirical_density(ens, grid, backend), state.rho, grid)))
    report.final_walkers = ens
    report.final_state = state
    return report


def moment_convergence(drift_grad, params: KernelParams, counts, seed: int = 0, replicates: int = 16):
    """RMS error of one-step sample moments against :func:`step_moments` for each count.

    Returns ``(errors, slope)`` where ``slope`` is the least-squares log-log
    slope of the error against the count.
    """
    g = np.atleast_1d(np.asarray(drift_grad, float))
    mean, var = step_moments(g, params)
    errors = []
    for M in counts:
        sq = 0.0
        for r in range(replicates):
            ens = WalkerEnsemble(np.zeros((int(M), g.size)), seed=seed + 7919 * r)
            out = sample_step(ens, AnalyticDrift(lambda chi: np.broadcast_to(g, chi.shape)), params)
            d = out.walkers
            sq += float(np.sum((d.mean(axis=0) - mean) ** 2 / var) + np.sum((d.var(axis=0) / var - 1.0) ** 2))
        errors.append(math.sqrt(sq / replicates))
    slope = float(np.polyfit(np.log(np.asarray(counts, float)), np.log(errors), 1)[0])
    return errors, slope
