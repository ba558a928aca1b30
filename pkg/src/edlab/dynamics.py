"""Local-time generators, e-Hamiltonians, brackets and integrators.

Sign and scale of the quantum term: with ``lam > 0`` and ``hbar**2 = 8 lam``
the e-Hamiltonian carries ``lam * int rho'**2/rho / sqrt(g)`` and the
Hamilton-Jacobi right-hand side carries ``+2 U / sqrt(g)`` with ``U`` the
quantum potential of :func:`edlab.statespace.quantum_potential`.  This is the
pair that maps onto the local Schrodinger equation under
``Psi = sqrt(rho) exp(i Phi / hbar)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import diags, identity, kron
from scipy.sparse.linalg import splu

from .geometry import InducedGeometry
from .statespace import ConfigGrid, Constants, EnsembleState, WaveState, extend_phase, quantum_potential

log = logging.getLogger(__name__)


class StepError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class PotentialSpec:
    """``zero``, ``mass`` (``m**2 chi**2 / 2``) or ``polynomial`` (``sum c_n chi**n / n!``)."""

    kind: str = "zero"
    mass: float = 0.0
    coefficients: tuple = ()

    def __post_init__(self):
        if self.kind not in ("zero", "mass", "polynomial"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if len(self.coefficients) > 7:
            raise ValueError("polynomial degree must be at most 6")
        if not all(math.isfinite(c) for c in self.coefficients) or not math.isfinite(self.mass):
            raise ValueError("potential coefficients must be finite")

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def of_mass(cls, m: float):
        return cls("mass", mass=float(m))

    @classmethod
    def polynomial(cls, coefficients):
        return cls("polynomial", coefficients=tuple(float(c) for c in coefficients))

    def __call__(self, chi):
        chi = np.asarray(chi, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(chi)
        if self.kind == "mass":
            return 0.5 * self.mass**2 * chi * chi
        out = np.zeros_like(chi)
        for n, c in enumerate(self.coefficients):
            out = out + c * chi**n / math.factorial(n)
        return out

    def derivative(self, chi):
        chi = np.asarray(chi, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(chi)
        if self.kind == "mass":
            return self.mass**2 * chi
        out = np.zeros_like(chi)
        for n, c in enumerate(self.coefficients[1:], start=1):
            out = out + c * chi ** (n - 1) / math.factorial(n - 1)
        return out


@dataclass(frozen=True)
class CandidateCoefficients:
    """Coefficients of the candidate local potential

    ``U = f1 rho'' + f2 Phi'' + h0 Phi'**2 + h1 rho' Phi' + h2 rho'**2``
    with ``f1 = f1_scale / rho`` and ``h2 = h2_scale / rho**2``.
    """

    f1_scale: float = 0.0
    f2: float = 0.0
    h0: float = 0.0
    h1: float = 0.0
    h2_scale: float = 0.0
    V: PotentialSpec = field(default_factory=PotentialSpec)

    def __post_init__(self):
        vals = (self.f1_scale, self.f2, self.h0, self.h1, self.h2_scale)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("candidate coefficients must be finite")

    @classmethod
    def canonical(cls, c: float = 1.0, V: PotentialSpec | None = None):
        return cls(f1_scale=c, h2_scale=-0.5 * c, V=V or PotentialSpec())

    @classmethod
    def from_constants(cls, constants: Constants, V: PotentialSpec | None = None):
        # the LTHJ quantum term is +2U/sqrt(g), i.e. a candidate with c = -2 lam
        return cls.canonical(-2.0 * constants.lam, V)

    @property
    def effective_lam(self) -> float:
        """Quantum coefficient of the canonical part ``f1_scale (rho''/rho - rho'**2/2rho**2)``."""
        return -0.5 * self.f1_scale

    def remainder(self) -> "CandidateCoefficients":
        """The terms left after removing the canonical part fixed by ``f1_scale``."""
        return CandidateCoefficients(0.0, self.f2, self.h0, self.h1, self.h2_scale + 0.5 * self.f1_scale, self.V)

    @property
    def is_zero(self) -> bool:
        return not any((self.f1_scale, self.f2, self.h0, self.h1, self.h2_scale))

    def as_dict(self) -> dict:
        return {
            "f1_scale": self.f1_scale,
            "f2": self.f2,
            "h0": self.h0,
            "h1": self.h1,
            "h2_scale": self.h2_scale,
            "V": {"kind": self.V.kind, "mass": self.V.mass, "coefficients": list(self.V.coefficients)},
        }


@dataclass(frozen=True)
class SiteGeometry:
    """Geometry seen by the field sites: ``sqrt(g)`` and ``g^11`` per site."""

    sqrt_g: np.ndarray
    g_inv: np.ndarray

    @classmethod
    def flat(cls, n_sites: int) -> "SiteGeometry":
        return cls(np.ones(n_sites), np.ones(n_sites))

    @classmethod
    def from_induced(cls, geom: InducedGeometry, sites=None) -> "SiteGeometry":
        sites = slice(None) if sites is None else np.asarray(sites)
        return cls(np.asarray(geom.sqrt_g[sites], float), np.asarray(geom.g_inv[sites], float))


# ---------------------------------------------------------------------------
# configuration-space stencils


def _shift_axis(a: np.ndarray, axis: int, lo: int, hi: int) -> np.ndarray:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(lo, hi)
    return a[tuple(sl)]


def face_step(phi: np.ndarray, axis: int) -> np.ndarray:
    """Phase increment ``Phi[i+1] - Phi[i]`` on the ``m - 1`` interior faces along ``axis``."""
    return np.diff(phi, axis=axis)


def _phase_scale(lam: float) -> float:
    return math.sqrt(8.0 * abs(lam))


def face_kinetic(phi: np.ndarray, axis: int, h: float, lam: float = 0.0) -> np.ndarray:
    """Kinetic energy per unit face density, the discrete ``(dPhi/dchi)**2 / 2``.

    For ``lam == 0`` this is ``(dPhi / h)**2 / 2``.  For ``lam != 0`` the phase
    step enters through ``2 (s/h)**2 sin**2(dPhi / 2s)`` with ``s = sqrt(8|lam|)``
    (``sinh`` for ``lam < 0``), which agrees with the plain form to second order
    and makes the site generators along different axes commute exactly.
    """
    d = face_step(phi, axis)
    if lam == 0:
        return 0.5 * (d / h) ** 2
    sc = _phase_scale(lam)
    f = np.sin if lam > 0 else np.sinh
    return 2.0 * (sc / h) ** 2 * f(d / (2.0 * sc)) ** 2


def face_velocity(phi: np.ndarray, axis: int, h: float, lam: float = 0.0) -> np.ndarray:
    """Current velocity on interior faces, ``h`` times the derivative of :func:`face_kinetic`."""
    d = face_step(phi, axis)
    if lam == 0:
        return d / h
    sc = _phase_scale(lam)
    f = np.sin if lam > 0 else np.sinh
    return (sc / h) * f(d / sc)


def face_density(rho: np.ndarray, axis: int, lam: float) -> np.ndarray:
    """Density on the interior faces along ``axis``.

    For ``lam != 0`` this is ``sqrt(rho_i rho_i+1)``, the product of the
    adjacent amplitudes: second order like the arithmetic mean, but it
    reproduces the discrete probability current of the wave picture to
    leading order in the phase step.  For ``lam == 0`` there is no wave
    picture and the arithmetic mean is used.  The geometric mean would add
    ``-(a_i+1 - a_i)**2 / 2`` times the face energy to the classical
    Hamiltonian, a grid-scale negative pressure that destabilises a
    contracting ensemble.
    """
    if lam == 0:
        return 0.5 * (_shift_axis(rho, axis, 1, None) + _shift_axis(rho, axis, 0, -1))
    a = np.sqrt(np.maximum(rho, 0.0))
    return _shift_axis(a, axis, 1, None) * _shift_axis(a, axis, 0, -1)


def face_divergence(flux: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Divergence of interior-face fluxes with zero flux through the box walls."""
    pad = [(0, 0)] * flux.ndim
    pad[axis] = (1, 1)
    return np.diff(np.pad(flux, pad), axis=axis) / h


def node_from_faces(face_vals: np.ndarray, axis: int) -> np.ndarray:
    """Half-sum of the two faces adjacent to each node (walls count zero)."""
    pad = [(0, 0)] * face_vals.ndim
    pad[axis] = (1, 1)
    p = np.pad(face_vals, pad)
    return 0.5 * (_shift_axis(p, axis, 1, None) + _shift_axis(p, axis, 0, -1))


def centered_diff(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Skew-symmetric centered difference (zero ghost nodes)."""
    pad = [(0, 0)] * f.ndim
    pad[axis] = (1, 1)
    p = np.pad(f, pad)
    return (_shift_axis(p, axis, 2, None) - _shift_axis(p, axis, 0, -2)) / (2.0 * h)


def lattice_gradient(grid: ConfigGrid, site: int) -> np.ndarray:
    """Centered periodic lattice difference ``(chi[x+1] - chi[x-1]) / 2`` on the grid."""
    n = grid.n_sites
    if n < 2:
        return np.zeros(grid.shape)
    c = grid.coords
    return 0.5 * (c[(site + 1) % n] - c[(site - 1) % n])


# ---------------------------------------------------------------------------
# local generators


def ltfp_rhs(state: EnsembleState, geom: SiteGeometry, x: int, lam: float = 0.0) -> np.ndarray:
    h = state.grid.h
    flux = face_density(state.rho, x, lam) * face_velocity(state.phi_big, x, h, lam)
    return -face_divergence(flux, x, h) / geom.sqrt_g[x]


def flat_fp_rhs(state: EnsembleState, lam: float = 0.0) -> np.ndarray:
    """Global flat-space form ``-sum_x d/dchi_x (rho dPhi/dchi_x)`` assembled in one pass."""
    h = state.grid.h
    total = np.zeros(state.grid.shape)
    for x in range(state.grid.n_sites):
        flux = face_density(state.rho, x, lam) * face_velocity(state.phi_big, x, h, lam)
        total -= face_divergence(flux, x, h)
    return total


def kinetic_density(state: EnsembleState, x: int, lam: float = 0.0) -> np.ndarray:
    """Nodal ``(dPhi/dchi)**2 / 2``, the rho-derivative of the face kinetic energy.

    With face densities ``a_i a_i+1`` and face energies ``K`` this is
    ``(a_i+1 K+ + a_i-1 K-) / (2 a_i)``; nodes with ``rho <= 0`` fall back to
    the plain half-sum ``(K+ + K-) / 2``, which is also the exact derivative
    for ``lam == 0`` where the faces carry the arithmetic mean.
    """
    k = face_kinetic(state.phi_big, x, state.grid.h, lam)
    if lam == 0:
        return node_from_faces(k, x)
    amp = np.sqrt(np.maximum(state.rho, 0.0))
    pad = [(0, 0)] * amp.ndim
    pad[x] = (1, 1)
    ap = np.pad(amp, pad)
    kp = np.pad(k, pad)
    up = _shift_axis(ap, x, 2, None) * _shift_axis(kp, x, 1, None)
    down = _shift_axis(ap, x, 0, -2) * _shift_axis(kp, x, 0, -1)
    out = node_from_faces(k, x)
    ok = amp > 0
    out[ok] = 0.5 * (up[ok] + down[ok]) / amp[ok]
    return out


def classical_potential(grid: ConfigGrid, geom: SiteGeometry, potential: PotentialSpec, x: int) -> np.ndarray:
    """``sqrt(g) g^11 (d1 chi)**2 / 2 + sqrt(g) V(chi_x)`` on the grid."""
    grad = lattice_gradient(grid, x)
    sg = geom.sqrt_g[x]
    return 0.5 * sg * geom.g_inv[x] * grad * grad + sg * potential(grid.coords[x])


def candidate_potential(state: EnsembleState, cand: CandidateCoefficients, x: int) -> np.ndarray:
    h = state.grid.h
    rho, phi = state.rho, state.phi_big
    d1r = centered_diff(rho, x, h)
    d1p = centered_diff(phi, x, h)
    pad = [(0, 0)] * rho.ndim
    pad[x] = (1, 1)
    d2r = (np.diff(np.pad(rho, pad, mode="edge"), n=2, axis=x)) / (h * h)
    d2p = (np.diff(np.pad(phi, pad, mode="edge"), n=2, axis=x)) / (h * h)
    mask = rho >= state.rho_floor()
    safe = np.where(mask, rho, 1.0)
    u = (cand.f1_scale / safe) * d2r + cand.f2 * d2p + cand.h0 * d1p**2 + cand.h1 * d1r * d1p
    u = u + (cand.h2_scale / safe**2) * d1r**2
    return np.where(mask, u, 0.0)


def generator_lam(constants: Constants, candidate: CandidateCoefficients | None = None) -> float:
    """Quantum coefficient carried by the kinetic and current terms."""
    return constants.lam if candidate is None else candidate.effective_lam


def lthj_rhs(
    state: EnsembleState,
    geom: SiteGeometry,
    potential: PotentialSpec,
    constants: Constants,
    x: int,
    candidate: CandidateCoefficients | None = None,
) -> np.ndarray:
    """Hamilton-Jacobi right-hand side at site ``x``.

    A candidate splits into its canonical part, ``f1_scale`` acting as a
    quantum coefficient ``-f1_scale / 2``, and a remainder evaluated by
    :func:`candidate_potential`.  The two agree term by term with the
    candidate potential in the continuum.
    """
    sg = geom.sqrt_g[x]
    lam = generator_lam(constants, candidate)
    if candidate is not None:
        potential = candidate.V
    out = kinetic_density(state, x, lam) / sg + classical_potential(state.grid, geom, potential, x)
    if lam != 0:
        out = out - 2.0 * quantum_potential(state, x, lam) / sg
    if candidate is not None:
        rest = candidate.remainder()
        if not rest.is_zero:
            out = out + candidate_potential(state, rest, x) / sg
    return -out


def tangential_rhs(state: EnsembleState, x: int):
    grid = state.grid
    grad = lattice_gradient(grid, x)
    if grid.n_sites < 2:
        z = np.zeros(grid.shape)
        return z, z.copy()
    return centered_diff(state.rho, x, grid.h) * grad, centered_diff(state.phi_big, x, grid.h) * grad


# ---------------------------------------------------------------------------
# e-functionals


def e_hamiltonian(state: EnsembleState, geom: SiteGeometry, potential: PotentialSpec, constants: Constants, x: int) -> float:
    grid = state.grid
    h = grid.h
    sg = geom.sqrt_g[x]
    kin = np.sum(face_density(state.rho, x, constants.lam) * face_kinetic(state.phi_big, x, h, constants.lam)) / sg
    pot = np.sum(state.rho * classical_potential(grid, geom, potential, x))
    total = kin + pot
    if constants.lam != 0:
        amp = np.sqrt(np.maximum(state.rho, 0.0))
        da = np.diff(amp, axis=x) / h
        # 4 lam |d sqrt(rho)|^2 == lam rho'^2 / rho; wall faces see zero ghosts
        lo = _shift_axis(amp, x, 0, 1) / h
        hi = _shift_axis(amp, x, -1, None) / h
        total += 4.0 * constants.lam * (np.sum(da * da) + np.sum(lo * lo) + np.sum(hi * hi)) / sg
    return float(total * grid.cell)


def e_momentum(state: EnsembleState, x: int) -> float:
    grid = state.grid
    if grid.n_sites < 2:
        return 0.0
    dr = centered_diff(state.rho, x, grid.h)
    return float(np.sum(state.phi_big * dr * lattice_gradient(grid, x)) * grid.cell)


def _fd_step(value: float) -> float:
    return max(1e-6, 1e-6 * abs(value))


def e_derivative(functional, state: EnsembleState, which: str, node) -> float:
    """Central difference of ``functional`` under a one-node perturbation, per cell volume."""
    arr = state.rho if which == "rho" else state.phi_big
    if which not in ("rho", "phi"):
        raise ValueError("which must be 'rho' or 'phi'")
    node = tuple(np.atleast_1d(node)) if not isinstance(node, tuple) else node
    s = _fd_step(arr[node])
    plus = arr.copy()
    minus = arr.copy()
    plus[node] += s
    minus[node] -= s
    key = "rho" if which == "rho" else "phi_big"
    fp = functional(state.with_values(**{key: plus}))
    fm = functional(state.with_values(**{key: minus}))
    if not (math.isfinite(fp) and math.isfinite(fm)):
        raise NumericalError(f"functional not finite at node {node}")
    return (fp - fm) / (2.0 * s * state.grid.cell)


def e_gradient(functional, state: EnsembleState, which: str) -> np.ndarray:
    out = np.empty(state.grid.shape)
    for node in np.ndindex(*state.grid.shape):
        out[node] = e_derivative(functional, state, which, node)
    return out


def poisson_bracket(F, G, state: EnsembleState) -> float:
    fr = e_gradient(F, state, "rho")
    fp = e_gradient(F, state, "phi")
    gr = e_gradient(G, state, "rho")
    gp = e_gradient(G, state, "phi")
    return float(np.sum(fr * gp - fp * gr) * state.grid.cell)


# ---------------------------------------------------------------------------
# integrators


def vector_field(state, geom, lapse, shift, potential, constants, candidate=None):
    lapse = np.asarray(lapse, float)
    shift = np.zeros_like(lapse) if shift is None else np.asarray(shift, float)
    drho = np.zeros(state.grid.shape)
    dphi = np.zeros(state.grid.shape)
    lam = generator_lam(constants, candidate)
    for x in range(state.grid.n_sites):
        if lapse[x] != 0:
            drho += lapse[x] * ltfp_rhs(state, geom, x, lam)
            dphi += lapse[x] * lthj_rhs(state, geom, potential, constants, x, candidate)
        if shift[x] != 0:
            tr, tp = tangential_rhs(state, x)
            drho += shift[x] * tr
            dphi += shift[x] * tp
    return drho, dphi


def stability_bound(grid: ConfigGrid, geom: SiteGeometry, constants: Constants, state: EnsembleState | None = None) -> float:
    """Largest ``dtau * max|lapse|`` the explicit stepper accepts."""
    h = grid.h
    rate = 0.0
    sg_min = float(np.min(geom.sqrt_g))
    if constants.lam != 0:
        # dispersive quantum pressure: omega ~ hbar**2 k**2 / 2 with k = 2/h per axis
        rate += grid.n_sites * constants.hbar * (2.0 / h) ** 2 / 2.0 / sg_min
    if state is not None:
        defined = state.rho >= state.rho_floor()
        vmax = 0.0
        for x in range(grid.n_sites):
            both = _shift_axis(defined, x, 1, None) & _shift_axis(defined, x, 0, -1)
            v = np.abs(face_velocity(state.phi_big, x, h))[both]
            vmax = max(vmax, float(v.max()) if v.size else 0.0)
        rate += grid.n_sites * 2.0 * vmax / h / sg_min
    return math.inf if rate == 0 else 2.8 / rate


def step(state, geom, lapse, shift, dtau, potential, constants, candidate=None, check=True):
    """Classical four-stage Runge-Kutta step of the coupled (rho, Phi) system."""
    lapse = np.asarray(lapse, float)
    if not np.any(lapse) and (shift is None or not np.any(shift)):
        return state
    if check:
        eff = constants if candidate is None else Constants(constants.eta, candidate.effective_lam)
        bound = stability_bound(state.grid, geom, eff, state)
        if abs(dtau) * float(np.max(np.abs(lapse))) > bound:
            raise StepError(f"dtau={dtau:g} exceeds the stability bound {bound:.3g}; use a smaller dtau")
        if shift is not None and np.any(shift) and state.grid.n_sites > 1:
            # centered advection at speed |d1 chi| <= L per axis
            rate = state.grid.n_sites * state.grid.L / state.grid.h * float(np.max(np.abs(shift)))
            if abs(dtau) * rate > 2.8:
                raise StepError(f"dtau={dtau:g} too large for the tangential transport; use a smaller dtau")

    def f(s):
        return vector_field(s, geom, lapse, shift, potential, constants, candidate)

    def moved(k, c):
        rho, phi = state.rho + c * k[0], state.phi_big + c * k[1]
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(phi))):
            raise StepError("non-finite intermediate stage; reduce dtau")
        return state.with_values(rho=rho, phi_big=phi)

    k1 = f(state)
    k2 = f(moved(k1, 0.5 * dtau))
    k3 = f(moved(k2, 0.5 * dtau))
    k4 = f(moved(k3, dtau))
    rho = state.rho + dtau / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    phi = state.phi_big + dtau / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(phi))):
        raise StepError("non-finite state after step; reduce dtau")
    out = state.with_values(rho=rho, phi_big=phi)
    if generator_lam(constants, candidate) != 0:
        # the classical phase obeys a rho-independent equation and stays smooth
        out = extend_phase(out)
    drift = abs(out.norm - state.norm)
    if drift > 1e-10:
        log.warning("normalization drift %.3e in one step", drift)
    return out


def step_normal(state, geom, lapse, dtau, potential, constants, candidate=None):
    return step(state, geom, lapse, None, dtau, potential, constants, candidate)


def substeps_for(grid, geom, constants, state, lapse, shift, duration, candidate=None) -> int:
    """Number of equal steps that keeps a leg of length ``duration`` inside the stability bound."""
    eff = constants if candidate is None else Constants(constants.eta, candidate.effective_lam)
    bound = stability_bound(grid, geom, eff, state)
    need = abs(duration) * float(np.max(np.abs(lapse))) / (0.9 * bound) if np.isfinite(bound) else 0.0
    if shift is not None and np.any(shift) and grid.n_sites > 1:
        need = max(need, abs(duration) * grid.n_sites * grid.L / grid.h * float(np.max(np.abs(shift))) / 2.5)
    return max(1, int(math.ceil(need)))


def total_energy(state, geom, potential, constants, lapse=None) -> float:
    """``sum_x N_x H_x``; with ``lapse`` omitted every site has weight one."""
    n = state.grid.n_sites
    lapse = np.ones(n) if lapse is None else np.asarray(lapse, float)
    return float(sum(lapse[x] * e_hamiltonian(state, geom, potential, constants, x) for x in range(n) if lapse[x] != 0))


@dataclass
class Trajectory:
    """Final state of an evolution plus one diagnostics row per step."""

    final: object
    rows: list = field(default_factory=list)

    COLUMNS = ("step", "tau", "norm", "energy", "min_rho", "max_defect")

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def evolve(initial, schedule, mode, geom, potential, constants, candidate=None) -> Trajectory:
    """Apply ``schedule`` to ``initial``.

    ``mode`` is ``pde`` (an :class:`EnsembleState` advanced by :func:`step`)
    or ``wave`` (a :class:`WaveState` advanced by Crank-Nicolson).  The
    defect column is the drift of the norm from its initial value.
    """
    if mode not in ("pde", "wave"):
        raise ValueError(f"unknown mode {mode!r}")
    state = initial
    norm0 = state.norm
    tau = 0.0
    steppers = {}

    def diag(k):
        if mode == "pde":
            energy = total_energy(state, geom, potential, constants) if candidate is None else math.nan
            min_rho = float(state.rho.min())
        else:
            energy = wave_energy(state, geom, potential, constants)
            min_rho = float((np.abs(state.psi) ** 2).min())
        return (k, tau, state.norm, energy, min_rho, abs(state.norm - norm0))

    rows = [diag(0)]
    for k, (lapse, shift, dtau) in enumerate(schedule, start=1):
        lapse = np.asarray(lapse, float)
        if mode == "pde":
            state = step(state, geom, lapse, shift, dtau, potential, constants, candidate)
        elif np.any(lapse):
            key = (lapse.tobytes(), float(dtau))
            if key not in steppers:
                steppers[key] = SchrodingerStepper(state.grid, geom, potential, constants, lapse, dtau)
            state = steppers[key].step(state)
        tau += dtau
        rows.append(diag(k))
    return Trajectory(state, rows)


def wave_energy(wave: WaveState, geom, potential, constants, lapse=None) -> float:
    n = wave.grid.n_sites
    lapse = np.ones(n) if lapse is None else np.asarray(lapse, float)
    H = _hamiltonian_matrix(wave.grid, geom, potential, constants, lapse)
    psi = wave.psi.ravel()
    return float(np.real(np.vdot(psi, H @ psi)) * wave.grid.cell)


def _hamiltonian_matrix(grid: ConfigGrid, geom: SiteGeometry, potential: PotentialSpec, constants: Constants, weights):
    """Sparse ``sum_x w_x H_x`` with Dirichlet walls, as a linear operator on the flattened grid."""
    m, n, h = grid.m, grid.n_sites, grid.h
    lap1 = diags([np.ones(m - 1), -2.0 * np.ones(m), np.ones(m - 1)], [-1, 0, 1]) / (h * h)
    eye = identity(m, format="csr")
    hbar2 = constants.hbar**2
    total = None
    diag = np.zeros(grid.shape)
    for x in range(n):
        w = float(weights[x])
        if w == 0:
            continue
        factors = [eye] * n
        factors[x] = lap1
        op = factors[0]
        for fct in factors[1:]:
            op = kron(op, fct, format="csr")
        term = (-0.5 * hbar2 / geom.sqrt_g[x] * w) * op
        total = term if total is None else total + term
        diag += w * classical_potential(grid, geom, potential, x)
    size = m**n
    if total is None:
        total = 0 * identity(size, format="csc")
    return (total + diags(diag.ravel())).tocsc()


def schrodinger_step(wave: WaveState, geom, potential, constants, lapse, dtau) -> WaveState:
    """Implicit trapezoidal (Crank-Nicolson) step; unitary for Hermitian ``H``."""
    lapse = np.asarray(lapse, float)
    if not np.any(lapse):
        return wave
    return SchrodingerStepper(wave.grid, geom, potential, constants, lapse, dtau).step(wave)


class SchrodingerStepper:
    """Factorized Crank-Nicolson propagator reused across steps."""

    def __init__(self, grid, geom, potential, constants, lapse, dtau):
        if not constants.lam > 0:
            raise NumericalError("wave mode needs a positive quantum coefficient")
        self.grid = grid
        H = _hamiltonian_matrix(grid, geom, potential, constants, lapse)
        size = grid.m**grid.n_sites
        a = 0.5j * dtau / constants.hbar
        I = identity(size, format="csc")
        try:
            self._lu = splu((I + a * H).tocsc())
        except RuntimeError as exc:  # singular factor
            raise NumericalError(f"Crank-Nicolson factorization failed: {exc}") from exc
        self._rhs = (I - a * H).tocsr()

    def step(self, wave: WaveState) -> WaveState:
        psi = self._lu.solve(self._rhs @ wave.psi.ravel())
        if not np.all(np.isfinite(psi)):
            raise NumericalError("linear solve produced non-finite values")
        return WaveState(self.grid, psi.reshape(self.grid.shape))
