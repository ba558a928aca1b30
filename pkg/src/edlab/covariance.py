"""Path independence, the smeared bracket algebra and the uniqueness scan."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from .dynamics import (
    CandidateCoefficients,
    PotentialSpec,
    SiteGeometry,
    e_hamiltonian,
    e_momentum,
    lthj_rhs,
    ltfp_rhs,
    generator_lam,
    step,
    substeps_for,
    tangential_rhs,
)
from .geometry import (
    Deformation,
    Hypersurface,
    SpacetimeBackground,
    apply_deformation,
    lattice_compensating_deformation,
    induced_metric,
)
from .statespace import ConfigGrid, Constants, EnsembleState, gaussian_state

CLOSE_TOL = 1e-8
FAIL_TOL = 1e-3


# ---------------------------------------------------------------------------
# order fits


def fitted_order(eps_values, discrepancies) -> float:
    """Least-squares slope of ``log discrepancy`` against ``log eps``."""
    eps = np.asarray(eps_values, dtype=float)
    d = np.asarray(discrepancies, dtype=float)
    if eps.size < 3 or d.size != eps.size:
        raise ValueError("fitted_order needs at least three (eps, discrepancy) pairs")
    if np.any(eps <= 0) or np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("eps must be positive and discrepancies nonnegative and finite")
    d = np.maximum(d, np.finfo(float).tiny)
    return float(np.polyfit(np.log(eps), np.log(d), 1)[0])


# ---------------------------------------------------------------------------
# two-path experiment


@dataclass
class TwoPathReport:
    eps_values: list
    discrepancy_rho: list
    discrepancy_phi: list
    order_rho: float
    order_phi: float

    @property
    def fitted_order(self) -> float:
        """The smaller of the two component orders; the slower one governs closure."""
        return min(self.order_rho, self.order_phi)

    def rows(self):
        return list(zip(self.eps_values, self.discrepancy_rho, self.discrepancy_phi))

    def as_dict(self) -> dict:
        return {
            "eps": list(self.eps_values),
            "disc_rho": list(self.discrepancy_rho),
            "disc_phi": list(self.discrepancy_phi),
            "order_rho": self.order_rho,
            "order_phi": self.order_phi,
            "fitted_order": self.fitted_order,
        }


def default_field_sites(n_surface: int, n_fields: int) -> np.ndarray:
    """Field sites placed symmetrically about the middle of the surface, ``n_surface/4`` apart."""
    spacing = n_surface // 4
    offsets = (np.arange(n_fields) - 0.5 * (n_fields - 1)) * spacing
    return (n_surface // 2 + np.round(offsets)).astype(int) % n_surface


def seam_window(n_surface: int, margin: int = 2) -> np.ndarray:
    """Smooth bump that vanishes within ``margin`` sites of the periodic seam."""
    x = np.arange(n_surface)
    w = np.sin(np.pi * (x - margin) / (n_surface - 2 * margin)) ** 2
    w[(x < margin) | (x > n_surface - margin)] = 0.0
    return w


def sinusoidal_lapses(n_surface: int, amplitude: float = 0.9, phase: float = 0.7):
    """Two positive, nonuniform lapse deformations with zero shift."""
    x = np.arange(n_surface)
    w = seam_window(n_surface)
    xi = Deformation(1.0 + amplitude * w * np.sin(2 * np.pi * x / n_surface), np.zeros(n_surface))
    eta = Deformation(1.0 + amplitude * w * np.cos(2 * np.pi * x / n_surface + phase), np.zeros(n_surface))
    return xi, eta


def path_check_state(grid: ConfigGrid) -> EnsembleState:
    """Correlated Gaussian with a curved phase, the standard two-path initial state."""
    if grid.n_sites != 2:
        covariance = np.eye(grid.n_sites) * 0.55
        s = gaussian_state(grid, center=0.1, covariance=covariance, momentum=0.3)
        return s.with_values(phi_big=s.phi_big + 0.1 * grid.coords[0] ** 2)
    s = gaussian_state(grid, center=[0.3, -0.2], covariance=[[0.5, 0.2], [0.2, 0.6]], momentum=[0.4, -0.3])
    X0, X1 = grid.coords
    return s.with_values(phi_big=s.phi_big + 0.3 * np.sin(X0) * np.sin(0.8 * X1) + 0.1 * X0**2)


def _leg(bg, surface, state, d: Deformation, scale, sites, potential, constants, candidate, substeps):
    """Advance surface and state along ``scale * d`` with the geometry frozen at the leg start."""
    geom = SiteGeometry.from_induced(induced_metric(bg, surface), sites)
    lapse = d.normal_comp[sites]
    shift = d.tangential_comp[sites]
    eff = constants if candidate is None else Constants(constants.eta, generator_lam(constants, candidate))
    nsub = max(substeps, substeps_for(state.grid, geom, eff, state, lapse, shift, scale))
    for _ in range(nsub):
        state = step(state, geom, lapse, shift, scale / nsub, potential, constants, candidate, check=False)
    return apply_deformation(bg, surface, d.scaled(scale)), state


def two_path_discrepancy(state, surface, bg, xi, eta, eps, potential, constants, candidate=None,
                         field_sites=None, substeps=4, support=1e-6):
    """``(max |d rho|, max |d Phi|)`` between the two orders of applying ``xi`` and ``eta``.

    Path A applies ``eps xi`` then ``eps eta``.  Path B applies ``eps eta``,
    then ``eps xi``, then ``eps**2`` times the compensating deformation.  The
    phase is compared only where both densities exceed ``support`` times
    their maximum; outside that set it carries no information.
    """
    sites = default_field_sites(surface.n_sites, state.grid.n_sites) if field_sites is None else np.asarray(field_sites)
    args = (sites, potential, constants, candidate, substeps)
    Sa, a = _leg(bg, surface, state, xi, eps, *args)
    Sa, a = _leg(bg, Sa, a, eta, eps, *args)
    Sb, b = _leg(bg, surface, state, eta, eps, *args)
    Sb, b = _leg(bg, Sb, b, xi, eps, *args)
    zeta = lattice_compensating_deformation(bg, surface, xi, eta)
    Sb, b = _leg(bg, Sb, b, zeta, eps * eps, *args)
    mask = (a.rho >= support * a.rho.max()) & (b.rho >= support * b.rho.max())
    d_rho = float(np.max(np.abs(a.rho - b.rho)))
    d_phi = float(np.max(np.abs(a.phi_big - b.phi_big)[mask])) if mask.any() else 0.0
    return d_rho, d_phi


def two_path_test(state, surface, bg, xi, eta, eps_values, potential, constants, candidate=None,
                  field_sites=None, substeps=4, support=1e-6) -> TwoPathReport:
    rows = [two_path_discrepancy(state, surface, bg, xi, eta, e, potential, constants, candidate,
                                 field_sites, substeps, support) for e in eps_values]
    d_rho = [r[0] for r in rows]
    d_phi = [r[1] for r in rows]
    return TwoPathReport(list(map(float, eps_values)), d_rho, d_phi,
                         fitted_order(eps_values, d_rho), fitted_order(eps_values, d_phi))


# ---------------------------------------------------------------------------
# constraint residual on closed-form test states


TERMS = ("f1_scale", "f2", "h0", "h1", "h2_scale")
_ORDERS = tuple((i, j) for i in range(5) for j in range(5 - i))
_RHO_PARAMS = ("m0", "m1", "p00", "p01", "p11", "l0", "l1", "off", "quad")
_PHI_PARAMS = ("a1", "a2", "a3", "b1", "b2", "b3", "cross", "bump", "n0", "n1")


@lru_cache(maxsize=None)
def _symbolic():
    """Lambdified partials of the test family and the generic residual of each term.

    Built once per process.  The residual of a term ``T`` is
    ``d_a(rho d_a T_b) - d_b(rho d_b T_a)`` written in terms of the partials
    ``rho_ij``/``Phi_ij`` (``i`` derivatives along ``a``, ``j`` along ``b``).
    """
    import sympy as sp

    a, b = sp.symbols("a b", real=True)
    rp = sp.symbols(_RHO_PARAMS, real=True)
    pp = sp.symbols(_PHI_PARAMS, real=True)
    m0, m1, p00, p01, p11, l0, l1, off, quad = rp
    a1, a2, a3, b1, b2, b3, cross, bump, n0, n1 = pp
    da, db = a - m0, b - m1
    rho = (1 + (l0 * a + l1 * b + off) ** 2 + quad * (a**2 + b**2)) * sp.exp(-(p00 * da**2 + 2 * p01 * da * db + p11 * db**2) / 2)
    phi = a1 * a + a2 * a**2 + a3 * a**3 + b1 * b + b2 * b**2 + b3 * b**3 + cross * a * b
    phi = phi + bump * (1 + a) * sp.exp(-((a - n0) ** 2) - (b - n1) ** 2)
    fam_rho = sp.lambdify((a, b, *rp), [sp.diff(rho, a, i, b, j) for i, j in _ORDERS], "numpy", cse=True)
    fam_phi = sp.lambdify((a, b, *pp), [sp.diff(phi, a, i, b, j) for i, j in _ORDERS], "numpy", cse=True)

    R = sp.Function("R")(a, b)
    P = sp.Function("P")(a, b)

    def terms(y):
        ry, py = sp.diff(R, y), sp.diff(P, y)
        return [sp.diff(ry, y) / R, sp.diff(py, y), py**2, ry * py, ry**2 / R**2]

    def side(u, v):
        return [sp.diff(R * sp.diff(t, u), u) for t in terms(v)]

    r_sym = sp.symbols([f"r{i}{j}" for i, j in _ORDERS])
    p_sym = sp.symbols([f"p{i}{j}" for i, j in _ORDERS])
    swap = {}
    for (i, j), rs, ps in zip(_ORDERS, r_sym, p_sym):
        swap[sp.diff(R, a, i, b, j) if i + j else R] = rs
        swap[sp.diff(P, a, i, b, j) if i + j else P] = ps
    res = [(l - r).xreplace(swap) for l, r in zip(side(a, b), side(b, a))]
    generic = sp.lambdify((*r_sym, *p_sym), res, "numpy", cse=True)
    return fam_rho, fam_phi, generic


@dataclass(frozen=True)
class TestState:
    """Closed-form test state over the two configuration values of a site pair.

    ``rho`` is a positive quadratic times a correlated Gaussian and ``Phi`` a
    cubic plus a polynomial-times-Gaussian bump; every coefficient and the
    battery of evaluation points are drawn from ``seed``.
    """

    seed: int
    n_points: int = 40
    params: dict = field(default_factory=dict, compare=False)

    __test__ = False  # not a pytest class

    @classmethod
    def random(cls, seed: int, n_points: int = 40) -> "TestState":
        rng = np.random.Generator(np.random.PCG64(seed))
        B = rng.normal(size=(2, 2)) * 0.3
        prec = np.diag(rng.uniform(0.6, 1.4, size=2)) + B @ B.T
        mu = rng.normal(size=2) * 0.3
        lin = rng.normal(size=2) * 0.5
        rho_p = (mu[0], mu[1], prec[0, 0], prec[0, 1], prec[1, 1], lin[0], lin[1],
                 float(rng.normal() * 0.5), float(rng.uniform(0.1, 0.5)))
        cubic = rng.normal(size=(2, 3)) * np.array([0.6, 0.3, 0.1])
        nu = rng.normal(size=2) * 0.5
        phi_p = (*cubic[0], *cubic[1], float(rng.normal() * 0.3), float(rng.normal() * 0.5), nu[0], nu[1])
        params = {
            "rho": dict(zip(_RHO_PARAMS, map(float, rho_p))),
            "phi": dict(zip(_PHI_PARAMS, map(float, phi_p))),
            "points": rng.normal(size=(n_points, 2)) * 0.7,
        }
        return cls(seed, n_points, params)

    def partials(self):
        """``(rho_ij, Phi_ij)`` at the battery points, one array per order in ``_ORDERS``."""
        fam_rho, fam_phi, _ = _symbolic()
        pts = self.params["points"]
        shape = (pts.shape[0],)
        r = [np.broadcast_to(np.asarray(v, float), shape) for v in fam_rho(pts[:, 0], pts[:, 1], *self.params["rho"].values())]
        p = [np.broadcast_to(np.asarray(v, float), shape) for v in fam_phi(pts[:, 0], pts[:, 1], *self.params["phi"].values())]
        return r, p

    @cached_property
    def _basis(self) -> np.ndarray:
        _, _, generic = _symbolic()
        r, p = self.partials()
        shape = (self.n_points,)
        return np.array([np.broadcast_to(np.asarray(v, float), shape) for v in generic(*r, *p)])

    def basis_residuals(self, x: int = 0, xp: int = 1) -> np.ndarray:
        """Residual of each candidate term at the battery points, shape ``(5, n_points)``.

        The state's first variable plays ``chi_x`` when ``x < xp``; swapping
        the pair flips the sign.
        """
        if x == xp:
            raise ValueError("a site pair needs two distinct sites")
        return self._basis if x < xp else -self._basis


def _coefficient_vector(candidate: CandidateCoefficients) -> np.ndarray:
    return np.array([getattr(candidate, t) for t in TERMS])


def constraint_residual(candidate: CandidateCoefficients, test_state: TestState, sites=(0, 1)) -> float:
    """Max over the battery of ``|D_x(rho D_x M_x') - D_x'(rho D_x' M_x)|``.

    ``M = U + V``; the ``V`` part depends on ``chi_x`` alone and drops out
    of both sides identically, so only the five ``U`` terms are evaluated.
    """
    x, xp = sites
    if x == xp:
        raise ValueError("constraint_residual needs two distinct sites")
    r = _coefficient_vector(candidate) @ test_state.basis_residuals(x, xp)
    return float(np.max(np.abs(r)))


def test_battery(n_states: int = 20, seed: int = 0):
    return [TestState.random(seed + k) for k in range(n_states)]


test_battery.__test__ = False


def coefficient_ode_residuals(f1, h2, rho_values):
    """``max |rho f1' + f1|`` and ``max |h2 - f1'/2|`` with ``f1'`` by complex step."""
    rho = np.asarray(rho_values, dtype=float)
    step_ = 1e-30
    df1 = np.imag(f1(rho + 1j * step_)) / step_
    return float(np.max(np.abs(rho * df1 + f1(rho)))), float(np.max(np.abs(h2(rho) - 0.5 * df1)))


@dataclass
class ScanReport:
    candidate: CandidateCoefficients
    residual: float
    tolerance: float = CLOSE_TOL
    ode_residuals: tuple = (math.nan, math.nan)

    @property
    def verdict(self) -> str:
        return "closes" if self.residual <= self.tolerance else "fails"

    @property
    def canonical(self) -> bool:
        c = self.candidate
        return c.f2 == 0 and c.h0 == 0 and c.h1 == 0 and c.h2_scale == -0.5 * c.f1_scale

    def as_dict(self) -> dict:
        return {
            "candidate": self.candidate.as_dict(),
            "residual": self.residual,
            "tolerance": self.tolerance,
            "verdict": self.verdict,
            "ode_residuals": list(self.ode_residuals),
        }


def default_scan_grid():
    """Product grid over all five coefficients, containing the canonical line and its neighbours."""
    out = []
    for f1 in (-1.0, -0.5, 0.0, 0.5, 1.0):
        for h2 in (-0.5, -0.25, 0.0, 0.25, 0.5):
            for f2 in (0.0, 0.1):
                for h0 in (0.0, 0.1):
                    for h1 in (0.0, -0.1):
                        out.append(CandidateCoefficients(f1, f2, h0, h1, h2))
    return out


def uniqueness_scan(candidates=None, battery=None, sites=(0, 1), tolerance: float = CLOSE_TOL,
                    rho_values=None) -> list:
    """Residual and verdict for every candidate over the whole test battery."""
    candidates = default_scan_grid() if candidates is None else list(candidates)
    battery = test_battery() if battery is None else battery
    rho_values = np.linspace(0.1, 2.0, 20) if rho_values is None else rho_values
    basis = np.stack([ts.basis_residuals(*sites) for ts in battery])  # (states, 5, points)
    reports = []
    for cand in candidates:
        r = np.einsum("t,stp->sp", _coefficient_vector(cand), basis)
        c, h = cand.f1_scale, cand.h2_scale
        ode = coefficient_ode_residuals(lambda p: c / p, lambda p: h / p**2, rho_values)
        reports.append(ScanReport(cand, float(np.max(np.abs(r))), tolerance, ode))
    return reports


# ---------------------------------------------------------------------------
# smeared bracket algebra


@dataclass
class AlgebraResiduals:
    perp_perp: float
    tan_perp: float
    tan_tan: float
    values: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"perp_perp": self.perp_perp, "tan_perp": self.tan_perp, "tan_tan": self.tan_tan, **self.values}


def lattice_derivative(f) -> np.ndarray:
    """Centered periodic difference, the contraction with the derivative of the lattice delta."""
    f = np.asarray(f, dtype=float)
    if f.size < 3:
        return np.zeros_like(f)
    return 0.5 * (np.roll(f, -1) - np.roll(f, 1))


def _normal_gradients(state, geom, potential, constants, f, lam_hj=None):
    """``(dH/drho, dH/dPhi)`` of ``sum_x f_x H_perp,x`` from the generator right-hand sides."""
    hj_constants = constants if lam_hj is None else Constants(constants.eta, lam_hj)
    d_rho = np.zeros(state.grid.shape)
    d_phi = np.zeros(state.grid.shape)
    for x, fx in enumerate(f):
        if fx == 0:
            continue
        d_phi += fx * ltfp_rhs(state, geom, x, constants.lam)
        d_rho -= fx * lthj_rhs(state, geom, potential, hj_constants, x)
    return d_rho, d_phi


def _tangential_gradients(state, g):
    d_rho = np.zeros(state.grid.shape)
    d_phi = np.zeros(state.grid.shape)
    for x, gx in enumerate(g):
        if gx == 0:
            continue
        tr, tp = tangential_rhs(state, x)
        d_phi += gx * tr
        d_rho -= gx * tp
    return d_rho, d_phi


def _bracket(a, b, cell) -> float:
    return float(np.sum(a[0] * b[1] - a[1] * b[0]) * cell)


def smeared_algebra_check(state: EnsembleState, surface: Hypersurface, bg: SpacetimeBackground, f, g, potential,
                          constants, f2=None, g2=None, field_sites=None, lam_hj=None, fd_eps=1e-6) -> AlgebraResiduals:
    """Residuals of the three smeared bracket relations on the field lattice.

    ``f``/``f2`` smear the normal e-Hamiltonians and ``g``/``g2`` the
    e-momenta; ``f2`` and ``g2`` default to shifted copies of ``f`` and ``g``.
    The mixed relation subtracts the response of ``H_perp(f)`` to a
    tangential surface deformation ``g``, taken by central differences.
    ``lam_hj`` replaces the quantum coefficient in the Hamilton-Jacobi
    gradient only, which probes how sensitive the relations are to it.
    """
    n = state.grid.n_sites
    sites = np.arange(n) if field_sites is None else np.asarray(field_sites)
    f = np.asarray(f, float)
    g = np.asarray(g, float)
    f2 = np.roll(f, 1) if f2 is None else np.asarray(f2, float)
    g2 = np.roll(g, 1) if g2 is None else np.asarray(g2, float)
    geom_i = induced_metric(bg, surface)
    geom = SiteGeometry.from_induced(geom_i, sites)
    cell = state.grid.cell

    Hperp = np.array([e_hamiltonian(state, geom, potential, constants, x) for x in range(n)])
    Htan = np.array([e_momentum(state, x) for x in range(n)])

    nf = _normal_gradients(state, geom, potential, constants, f, lam_hj)
    nf2 = _normal_gradients(state, geom, potential, constants, f2, lam_hj)
    tg = _tangential_gradients(state, g)
    tg2 = _tangential_gradients(state, g2)

    # perp-perp
    lhs_pp = _bracket(nf, nf2, cell)
    rhs_pp = float(np.sum(geom.g_inv * Htan * (f * lattice_derivative(f2) - f2 * lattice_derivative(f))))

    # tan-perp with the surface term
    def smeared_perp(s):
        gm = SiteGeometry.from_induced(induced_metric(bg, s), sites)
        return sum(f[x] * e_hamiltonian(state, gm, potential, constants, x) for x in range(n))

    full_g = np.zeros(surface.n_sites)
    full_g[sites] = g
    up = apply_deformation(bg, surface, Deformation(np.zeros(surface.n_sites), fd_eps * full_g))
    down = apply_deformation(bg, surface, Deformation(np.zeros(surface.n_sites), -fd_eps * full_g))
    surface_term = (smeared_perp(up) - smeared_perp(down)) / (2.0 * fd_eps)
    lhs_tp = _bracket(tg, nf, cell) - surface_term
    rhs_tp = float(np.sum(g * Hperp * lattice_derivative(f)))

    # tan-tan
    lhs_tt = _bracket(tg, tg2, cell)
    rhs_tt = float(np.sum(Htan * (g * lattice_derivative(g2) - g2 * lattice_derivative(g))))

    values = {
        "lhs_perp_perp": lhs_pp, "rhs_perp_perp": rhs_pp,
        "lhs_tan_perp": lhs_tp, "rhs_tan_perp": rhs_tp, "surface_term": surface_term,
        "lhs_tan_tan": lhs_tt, "rhs_tan_tan": rhs_tt,
    }
    return AlgebraResiduals(abs(lhs_pp - rhs_pp), abs(lhs_tp - rhs_tp), abs(lhs_tt - rhs_tt), values)
