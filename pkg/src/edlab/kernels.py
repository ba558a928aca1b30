"""Backend selection for the walker kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over.  Setting ``EDLAB_PURE_PYTHON=1`` forces the
fallback.  ``EDLAB_THREADS`` caps the threads the compiled kernels use.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_compiled = None
if not os.environ.get("EDLAB_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def thread_count() -> int:
    raw = os.environ.get("EDLAB_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"EDLAB_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"EDLAB_THREADS must be a positive integer, got {raw!r}")
    return value


def normals(seed, counter, walker_start, n_walkers, n_sites, backend=None):
    if _use(backend) == "cython":
        return _compiled.normals(seed & 0xFFFFFFFFFFFFFFFF, counter, walker_start, n_walkers, n_sites, thread_count())
    return _kernels_py.normals(seed, counter, walker_start, n_walkers, n_sites)


def interp_fields(chi, fields, L, m, backend=None):
    chi = np.ascontiguousarray(chi, dtype=np.float64)
    if _use(backend) == "cython":
        return _compiled.interp_fields(chi, np.ascontiguousarray(fields, dtype=np.float64), float(L), int(m), thread_count())
    return _kernels_py.interp_fields(chi, np.asarray(fields, dtype=np.float64), float(L), int(m))


def histogram(chi, L, m, backend=None):
    chi = np.ascontiguousarray(chi, dtype=np.float64)
    if _use(backend) == "cython":
        return _compiled.histogram(chi, float(L), int(m))
    return _kernels_py.histogram(chi, float(L), int(m))


def _use(backend):
    if backend is None:
        return BACKEND
    if backend == "cython" and _compiled is None:
        raise RuntimeError("compiled kernels are not available")
    if backend not in ("cython", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend
