"""Ensemble states on a configuration-space grid and the Madelung map."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

RHO_FLOOR_REL = 1e-12


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class ConfigGrid:
    """Tensor grid over ``n_sites`` field values, ``m`` nodes on ``[-L, L]`` per axis."""

    n_sites: int
    L: float
    m: int

    def __post_init__(self):
        if self.n_sites < 1:
            raise StateError("n_sites must be positive")
        if self.m < 16:
            raise StateError("points_per_axis below minimum 16")
        if not self.L > 0:
            raise StateError("box_half_width must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.L / (self.m - 1)

    @property
    def cell(self) -> float:
        return self.h ** self.n_sites

    @property
    def shape(self) -> tuple:
        return (self.m,) * self.n_sites

    @cached_property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.m)

    @cached_property
    def coords(self) -> tuple:
        """One coordinate array per site, each of full grid shape."""
        return tuple(np.meshgrid(*([self.axis] * self.n_sites), indexing="ij"))

    def integrate(self, values) -> float:
        return float(np.sum(values) * self.cell)


@dataclass(frozen=True)
class Constants:
    """Units constant ``eta`` and quantum coefficient ``lam`` (``lam > 0`` is quantum)."""

    eta: float = 1.0
    lam: float = 0.0

    def __post_init__(self):
        if not self.eta > 0:
            raise StateError("eta must be positive")

    @property
    def hbar(self) -> float:
        return math.sqrt(8.0 * abs(self.lam))

    @property
    def k_hat(self) -> float:
        if self.lam == 0:
            return math.inf
        return self.eta / self.hbar

    @classmethod
    def from_hbar(cls, hbar: float, eta: float = 1.0) -> "Constants":
        return cls(eta=eta, lam=hbar * hbar / 8.0)


@dataclass(frozen=True)
class EnsembleState:
    grid: ConfigGrid
    rho: np.ndarray
    phi_big: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        phi = np.asarray(self.phi_big, dtype=float)
        if rho.shape != self.grid.shape or phi.shape != self.grid.shape:
            raise StateError(f"state arrays must have grid shape {self.grid.shape}")
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(phi))):
            raise StateError("state values must be finite")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "phi_big", phi)

    @property
    def norm(self) -> float:
        return self.grid.integrate(self.rho)

    def rho_floor(self) -> float:
        return RHO_FLOOR_REL * float(np.max(self.rho))

    def with_values(self, rho=None, phi_big=None) -> "EnsembleState":
        return replace(
            self,
            rho=self.rho if rho is None else rho,
            phi_big=self.phi_big if phi_big is None else phi_big,
        )

    def to_csv(self, path) -> None:
        write_grid_csv(path, self.grid, {"rho": self.rho, "phi": self.phi_big})


@dataclass(frozen=True)
class WaveState:
    grid: ConfigGrid
    psi: np.ndarray = field(repr=False)

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=complex)
        if psi.shape != self.grid.shape:
            raise StateError(f"wave array must have grid shape {self.grid.shape}")
        object.__setattr__(self, "psi", psi)

    @property
    def norm(self) -> float:
        return self.grid.integrate(np.abs(self.psi) ** 2)

    def to_csv(self, path) -> None:
        write_grid_csv(path, self.grid, {"re_psi": self.psi.real, "im_psi": self.psi.imag})


def write_grid_csv(path, grid: ConfigGrid, columns: dict) -> None:
    names = [f"chi{k}" for k in range(grid.n_sites)] + list(columns)
    flat_coords = [c.ravel() for c in grid.coords]
    flat_vals = [np.asarray(v).ravel() for v in columns.values()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*flat_coords, *flat_vals):
            w.writerow([repr(float(v)) for v in row])


def normalize(state: EnsembleState) -> EnsembleState:
    total = state.norm
    if not total > 0:
        raise StateError("cannot normalize an all-zero density")
    return state.with_values(rho=state.rho / total)


def gaussian_state(grid: ConfigGrid, center=0.0, width=1.0, momentum=0.0, covariance=None) -> EnsembleState:
    """Normalized Gaussian density with linear phase ``momentum . chi``."""
    n = grid.n_sites
    center = np.broadcast_to(np.asarray(center, float), (n,))
    momentum = np.broadcast_to(np.asarray(momentum, float), (n,))
    if covariance is None:
        covariance = np.eye(n) * np.broadcast_to(np.asarray(width, float) ** 2, (n,))
    prec = np.linalg.inv(np.asarray(covariance, float))
    d = np.stack([c - c0 for c, c0 in zip(grid.coords, center)], axis=-1)
    quad = np.einsum("...i,ij,...j->...", d, prec, d)
    rho = np.exp(-0.5 * quad)
    phi = sum(p * c for p, c in zip(momentum, grid.coords))
    return normalize(EnsembleState(grid, rho, np.asarray(phi, float) * np.ones(grid.shape)))


def _second_diff(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Centered second difference with zero ghost nodes."""
    pad = [(0, 0)] * f.ndim
    pad[axis] = (1, 1)
    fp = np.pad(f, pad)
    lo = np.take(fp, range(0, f.shape[axis]), axis=axis)
    hi = np.take(fp, range(2, f.shape[axis] + 2), axis=axis)
    return (hi - 2.0 * f + lo) / (h * h)


def quantum_potential(state: EnsembleState, site: int, lam: float) -> np.ndarray:
    """``lam * (rho''/rho - (rho'/rho)**2 / 2)`` along the axis of ``site``.

    Evaluated as ``2 lam (sqrt rho)''/sqrt rho``, the same expression written
    through the amplitude; zero where ``rho`` sits below the floor.
    """
    amp = np.sqrt(np.maximum(state.rho, 0.0))
    lap = _second_diff(amp, site, state.grid.h)
    mask = state.rho >= state.rho_floor()
    out = np.zeros_like(amp)
    out[mask] = 2.0 * lam * lap[mask] / amp[mask]
    return out


def to_wave(state: EnsembleState, constants: Constants) -> WaveState:
    if constants.lam == 0:
        raise StateError("Madelung map needs a nonzero quantum coefficient")
    phase = constants.k_hat * state.phi_big / constants.eta
    return WaveState(state.grid, np.sqrt(np.maximum(state.rho, 0.0)) * np.exp(1j * phase))


def _unwrap_nd(angle: np.ndarray) -> np.ndarray:
    # fixed traversal: the axis-0 line through the origin corner first, then
    # lines along each further axis starting from nodes already unwrapped
    out = angle.copy()
    nd = angle.ndim
    for ax in range(nd):
        sl = tuple([slice(None)] * (ax + 1) + [0] * (nd - ax - 1))
        out[sl] = np.unwrap(out[sl], axis=ax)
    return out


def from_wave(wave: WaveState, constants: Constants, rho_floor: float | None = None) -> EnsembleState:
    rho = np.abs(wave.psi) ** 2
    if not np.any(rho > 0):
        raise StateError("wave is identically zero")
    if rho_floor is None:
        rho_floor = RHO_FLOOR_REL * float(rho.max())
    defined = rho >= rho_floor
    angle = np.angle(wave.psi)
    # give undefined nodes the value of the nearest defined node before unwrapping
    angle = fill_nearest(angle, defined)
    phase = _unwrap_nd(angle)
    phi = constants.eta / constants.k_hat * phase
    return EnsembleState(wave.grid, rho, phi)


def fill_nearest(values: np.ndarray, defined: np.ndarray) -> np.ndarray:
    """Copy of ``values`` with each undefined node set to its nearest defined node."""
    if defined.all():
        return values
    from scipy import ndimage

    _, idx = ndimage.distance_transform_edt(~defined, return_indices=True)
    return values[tuple(idx)]


def extend_phase(state: EnsembleState) -> EnsembleState:
    """Replace ``Phi`` below the density floor by its nearest value above it.

    ``Phi`` carries no information where ``rho`` vanishes, and leaving it free
    there lets the jump of the floored quantum potential build an ever steeper
    phase front in the empty tails.
    """
    defined = state.rho >= state.rho_floor()
    if defined.all():
        return state
    return state.with_values(phi_big=fill_nearest(state.phi_big, defined))


def drift_potential(state: EnsembleState, constants: Constants) -> np.ndarray:
    """``phi = Phi/eta + log sqrt(rho)``, with ``rho`` clipped at the floor."""
    rho = np.maximum(state.rho, state.rho_floor())
    return state.phi_big / constants.eta + 0.5 * np.log(rho)


def phase_from_drift(drift: np.ndarray, state: EnsembleState, constants: Constants) -> np.ndarray:
    rho = np.maximum(state.rho, state.rho_floor())
    return constants.eta * (drift - 0.5 * np.log(rho))
