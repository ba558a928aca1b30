"""Pure-numpy walker kernels.

Reference implementation of the compiled kernels in ``_kernels.pyx``.  Both
produce the same normals for a given ``(seed, walker, counter, site)`` key,
so results do not depend on how walkers are split across threads.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_PI = 6.283185307179586
_INV_2_53 = 1.0 / 9007199254740992.0


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def walker_keys(seed: int, walker_start: int, n_walkers: int) -> np.ndarray:
    w = np.arange(walker_start, walker_start + n_walkers, dtype=np.uint64)
    return _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _mix(w))


def normals(seed: int, counter: int, walker_start: int, n_walkers: int, n_sites: int) -> np.ndarray:
    """Standard normals of shape ``(n_walkers, n_sites)`` from a counter-based hash."""
    with np.errstate(over="ignore"):
        keys = walker_keys(seed, walker_start, n_walkers)[:, None]
        base = np.uint64(2) * (np.uint64(counter) * np.uint64(n_sites) + np.arange(n_sites, dtype=np.uint64))
        b1 = _mix(keys + base[None, :])
        b2 = _mix(keys + base[None, :] + np.uint64(1))
    u1 = ((b1 >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
    u2 = (b2 >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


def _cell_coords(chi: np.ndarray, L: float, h: float, m: int):
    t = (np.clip(chi, -L, L) + L) / h
    i0 = np.minimum(np.floor(t).astype(np.int64), m - 2)
    return i0, t - i0


def interp_fields(chi: np.ndarray, fields: np.ndarray, L: float, m: int) -> np.ndarray:
    """Multilinear interpolation of ``k`` grid fields at walker positions.

    ``fields`` has shape ``(k, m, ..., m)``; positions outside the box are
    clamped to it.  Returns shape ``(n_walkers, k)``.
    """
    n = chi.shape[1]
    h = 2.0 * L / (m - 1)
    i0, frac = _cell_coords(chi, L, h, m)
    out = np.zeros((chi.shape[0], fields.shape[0]))
    for corner in range(1 << n):
        idx = []
        weight = np.ones(chi.shape[0])
        for ax in range(n):
            bit = (corner >> ax) & 1
            idx.append(i0[:, ax] + bit)
            weight = weight * (frac[:, ax] if bit else 1.0 - frac[:, ax])
        flat = np.ravel_multi_index(tuple(idx), (m,) * n)
        vals = fields.reshape(fields.shape[0], -1)[:, flat]
        out += (weight[None, :] * vals).T
    return out


def histogram(chi: np.ndarray, L: float, m: int) -> np.ndarray:
    """Counts per node cell; walkers outside the box land in the nearest edge cell."""
    n = chi.shape[1]
    h = 2.0 * L / (m - 1)
    idx = np.clip(np.floor((chi + L) / h + 0.5).astype(np.int64), 0, m - 1)
    flat = np.ravel_multi_index(tuple(idx[:, ax] for ax in range(n)), (m,) * n)
    return np.bincount(flat, minlength=m**n).reshape((m,) * n)
