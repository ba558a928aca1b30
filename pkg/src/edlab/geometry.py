"""Embedding kinematics for spacelike slices of a fixed 1+1 background.

Surfaces live on a periodic label lattice with unit spacing.  The time
embedding ``X0`` is periodic in the label, the space embedding ``X1`` winds
by ``period`` once around the lattice.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class GeometryError(ValueError):
    """Raised when a surface fails to be spacelike."""


def periodic_diff(f: np.ndarray) -> np.ndarray:
    """Centered periodic difference with unit label spacing."""
    return 0.5 * (np.roll(f, -1, axis=-1) - np.roll(f, 1, axis=-1))


@dataclass(frozen=True)
class SpacetimeBackground:
    """Static diagonal metric ``diag(-f(X1)**2, 1)``.

    ``kind`` is one of ``minkowski``, ``rindler`` or ``static-diagonal``.
    Rindler uses the profile ``f = 1 + acceleration * X1``.
    """

    kind: str = "minkowski"
    acceleration: float = 0.0
    profile: Callable[[np.ndarray], np.ndarray] | None = None
    profile_derivative: Callable[[np.ndarray], np.ndarray] | None = None

    @classmethod
    def minkowski(cls) -> "SpacetimeBackground":
        return cls("minkowski")

    @classmethod
    def rindler(cls, acceleration: float = 1.0) -> "SpacetimeBackground":
        return cls("rindler", acceleration=float(acceleration))

    @classmethod
    def static_diagonal(cls, profile, profile_derivative=None) -> "SpacetimeBackground":
        return cls("static-diagonal", profile=profile, profile_derivative=profile_derivative)

    def lapse_profile(self, x1) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        if self.kind == "minkowski":
            return np.ones_like(x1)
        if self.kind == "rindler":
            return 1.0 + self.acceleration * x1
        if self.kind == "static-diagonal":
            return np.asarray(self.profile(x1), dtype=float) * np.ones_like(x1)
        raise ValueError(f"unknown background kind {self.kind!r}")

    def metric(self, x0, x1) -> np.ndarray:
        """Metric components at the events, shape ``(..., 2, 2)``."""
        x0, x1 = np.broadcast_arrays(np.asarray(x0, float), np.asarray(x1, float))
        f = self.lapse_profile(x1)
        g = np.zeros(x0.shape + (2, 2))
        g[..., 0, 0] = -f * f
        g[..., 1, 1] = 1.0
        return g


@dataclass(frozen=True)
class Hypersurface:
    x0: np.ndarray
    x1: np.ndarray
    period: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).copy()
        x1 = np.asarray(self.x1, dtype=float).copy()
        if x0.shape != x1.shape or x0.ndim != 1 or x0.size < 3:
            raise GeometryError("embedding needs two 1-d arrays of at least 3 sites")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x1", x1)
        if self.period is None:
            object.__setattr__(self, "period", float(x0.size))

    @property
    def n_sites(self) -> int:
        return self.x0.size

    @classmethod
    def flat(cls, n_sites: int, time: float = 0.0, tilt: float = 0.0, origin: float = 0.0):
        x = np.arange(n_sites, dtype=float)
        return cls(time + tilt * x, origin + x)

    def tangent(self) -> np.ndarray:
        """``dX/dx`` per site, shape ``(n, 2)``."""
        d0 = periodic_diff(self.x0)
        d1 = periodic_diff(self.x1)
        # undo the winding jump of X1 at the two wrap sites
        d1[0] += 0.5 * self.period
        d1[-1] += 0.5 * self.period
        return np.stack([d0, d1], axis=-1)

    def events(self) -> np.ndarray:
        return np.stack([self.x0, self.x1], axis=-1)

    def displaced(self, delta: np.ndarray) -> "Hypersurface":
        return Hypersurface(self.x0 + delta[:, 0], self.x1 + delta[:, 1], self.period)


@dataclass(frozen=True)
class InducedGeometry:
    g11: np.ndarray
    sqrt_g: np.ndarray
    g_inv: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    metric: np.ndarray


@dataclass(frozen=True)
class Deformation:
    normal_comp: np.ndarray
    tangential_comp: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.normal_comp, dtype=float)
        b = np.asarray(self.tangential_comp, dtype=float)
        a, b = np.broadcast_arrays(a, b)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise GeometryError("deformation components must be finite")
        object.__setattr__(self, "normal_comp", a.copy())
        object.__setattr__(self, "tangential_comp", b.copy())

    @classmethod
    def zero(cls, n_sites: int) -> "Deformation":
        return cls(np.zeros(n_sites), np.zeros(n_sites))

    def scaled(self, c: float) -> "Deformation":
        return Deformation(c * self.normal_comp, c * self.tangential_comp)


@dataclass(frozen=True)
class FoliationSchedule:
    """Sequence of ``(lapse, shift, dtau)`` steps."""

    steps: tuple = ()

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    @classmethod
    def uniform(cls, lapse, shift, dtau: float, n_steps: int) -> "FoliationSchedule":
        lapse = np.asarray(lapse, dtype=float)
        shift = np.broadcast_to(np.asarray(shift, dtype=float), lapse.shape).copy()
        return cls(tuple((lapse, shift, float(dtau)) for _ in range(int(n_steps))))


def induced_metric(bg: SpacetimeBackground, s: Hypersurface) -> InducedGeometry:
    g = bg.metric(s.x0, s.x1)
    t = s.tangent()
    w = np.einsum("xmn,xn->xm", g, t)  # lowered tangent
    g11 = np.einsum("xm,xm->x", w, t)
    bad = np.flatnonzero(~(g11 > 0))
    if bad.size:
        raise GeometryError(f"surface not spacelike at site {int(bad[0])} (g11={g11[bad[0]]:.3e})")
    # orthogonal to the tangent: n^mu proportional to (w_1, -w_0)
    v = np.stack([w[:, 1], -w[:, 0]], axis=-1)
    vv = np.einsum("xm,xmn,xn->x", v, g, v)
    if np.any(vv >= 0):
        site = int(np.flatnonzero(vv >= 0)[0])
        raise GeometryError(f"no timelike normal at site {site}")
    n = v / np.sqrt(-vv)[:, None]
    n *= np.sign(n[:, 0])[:, None]
    sqrt_g = np.sqrt(g11)
    return InducedGeometry(g11=g11, sqrt_g=sqrt_g, g_inv=1.0 / g11, normal=n, tangent=t, metric=g)


def apply_deformation(bg: SpacetimeBackground, s: Hypersurface, d: Deformation) -> Hypersurface:
    geom = induced_metric(bg, s)
    delta = d.normal_comp[:, None] * geom.normal + d.tangential_comp[:, None] * geom.tangent
    out = s.displaced(delta)
    induced_metric(bg, out)  # raises if the image is not spacelike
    return out


def compensating_deformation(geom: InducedGeometry, xi: Deformation, eta: Deformation) -> Deformation:
    """Deformation closing the loop ``xi, eta`` versus ``eta, xi``.

    Applying ``eta`` then ``xi`` and then ``eps**2`` times the returned
    deformation lands on the surface reached by ``xi`` then ``eta`` up to
    third order in ``eps``.
    """
    D = periodic_diff
    xn, xt = xi.normal_comp, xi.tangential_comp
    en, et = eta.normal_comp, eta.tangential_comp
    zeta_n = xt * D(en) - et * D(xn)
    zeta_t = geom.g_inv * (xn * D(en) - en * D(xn)) + xt * D(et) - et * D(xt)
    return Deformation(-zeta_n, -zeta_t)


def _profile_slope(bg: SpacetimeBackground, x1: np.ndarray) -> np.ndarray:
    if bg.kind == "minkowski":
        return np.zeros_like(x1)
    if bg.kind == "rindler":
        return np.full_like(x1, bg.acceleration)
    if bg.profile_derivative is not None:
        return np.asarray(bg.profile_derivative(x1), dtype=float) * np.ones_like(x1)
    h = 1e-6 * np.maximum(1.0, np.abs(x1))
    return (bg.lapse_profile(x1 + h) - bg.lapse_profile(x1 - h)) / (2.0 * h)


def _unit_normal(t0, t1, f):
    """Future unit normal of a tangent ``(t0, t1)`` in ``diag(-f**2, 1)``; complex-step safe."""
    root = np.sqrt(t1 * t1 - f * f * t0 * t0)
    return np.stack([t1 / (f * root), f * t0 / root], axis=-1)


def _displacement(geom: InducedGeometry, d: Deformation) -> np.ndarray:
    return d.normal_comp[:, None] * geom.normal + d.tangential_comp[:, None] * geom.tangent


def lattice_compensating_deformation(bg: SpacetimeBackground, s: Hypersurface, xi: Deformation,
                                     eta: Deformation) -> Deformation:
    """Compensating deformation for the lattice update used by :func:`apply_deformation`.

    The second of two steps moves along the normal and tangent of the
    surface left by the first, and those follow from lattice differences of
    the first displacement.  The order-``eps**2`` mismatch of the two orders
    is therefore the bracket of the two displacement fields taken with the
    same lattice differences.  It is computed here exactly (the normal is
    linearized by complex step) and projected on the normal and tangent.  In
    the continuum limit it reduces to :func:`compensating_deformation`; on a
    flat background with constant lapse profile the two agree to round-off.
    """
    geom = induced_metric(bg, s)
    t = geom.tangent
    f = bg.lapse_profile(s.x1)
    slope = _profile_slope(bg, s.x1)
    h = 1e-30
    sign = np.sign(t[:, 1])

    def dnormal(dx):
        dt = np.stack([periodic_diff(dx[:, 0]), periodic_diff(dx[:, 1])], axis=-1)
        nc = _unit_normal(t[:, 0] + 1j * h * dt[:, 0], t[:, 1] + 1j * h * dt[:, 1], f + 1j * h * slope * dx[:, 1])
        return sign[:, None] * np.imag(nc) / h, dt

    dx_xi = _displacement(geom, xi)
    dx_eta = _displacement(geom, eta)
    dn_xi, dt_xi = dnormal(dx_xi)
    dn_eta, dt_eta = dnormal(dx_eta)
    mismatch = (eta.normal_comp[:, None] * dn_xi - xi.normal_comp[:, None] * dn_eta
                + eta.tangential_comp[:, None] * dt_xi - xi.tangential_comp[:, None] * dt_eta)
    g = geom.metric
    zeta_n = -np.einsum("xm,xmn,xn->x", geom.normal, g, mismatch)
    zeta_t = geom.g_inv * np.einsum("xm,xmn,xn->x", t, g, mismatch)
    return Deformation(zeta_n, zeta_t)


def surface_commutator_residual(bg, s, xi, eta, epsilon: float, lattice: bool = True) -> float:
    """Largest event mismatch between the two orders, after the compensating step.

    ``lattice`` selects :func:`lattice_compensating_deformation`; otherwise the
    continuum structure-function form is used, which leaves an
    ``eps**2 h**2`` remainder wherever the background profile varies.
    """
    a = apply_deformation(bg, apply_deformation(bg, s, xi.scaled(epsilon)), eta.scaled(epsilon))
    b = apply_deformation(bg, apply_deformation(bg, s, eta.scaled(epsilon)), xi.scaled(epsilon))
    if lattice:
        zeta = lattice_compensating_deformation(bg, s, xi, eta)
    else:
        zeta = compensating_deformation(induced_metric(bg, s), xi, eta)
    b = apply_deformation(bg, b, zeta.scaled(epsilon**2))
    return float(np.max(np.abs(a.events() - b.events())))
