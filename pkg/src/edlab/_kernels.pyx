# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled walker kernels; same contracts as ``_kernels_py``."""
import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport cos, floor, log, sqrt
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = z + GOLDEN
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def normals(uint64_t seed, uint64_t counter, int64_t walker_start, int64_t n_walkers, int n_sites, int threads=1):
    out = np.empty((n_walkers, n_sites), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef int64_t w
    cdef int x
    cdef uint64_t key, base, b1, b2
    cdef double u1, u2
    for w in prange(n_walkers, nogil=True, num_threads=threads, schedule="static"):
        key = _mix(seed ^ _mix(<uint64_t>(walker_start + w)))
        for x in range(n_sites):
            base = 2 * (counter * <uint64_t>n_sites + <uint64_t>x)
            b1 = _mix(key + base)
            b2 = _mix(key + base + 1)
            u1 = (<double>(b1 >> 11) + 1.0) * INV_2_53
            u2 = <double>(b2 >> 11) * INV_2_53
            o[w, x] = sqrt(-2.0 * log(u1)) * cos(TWO_PI * u2)
    return out


cdef void _interp_one(const double[:, ::1] chi, int64_t w, const double[:, ::1] f, double[:, ::1] o,
                     int n, int k, double L, double h, int m) noexcept nogil:
    cdef int64_t i0[8]
    cdef double frac[8]
    cdef int ax, corner, bit, c
    cdef int64_t flat, stride
    cdef double t, weight
    for ax in range(n):
        t = chi[w, ax]
        if t < -L:
            t = -L
        elif t > L:
            t = L
        t = (t + L) / h
        i0[ax] = <int64_t>floor(t)
        if i0[ax] > m - 2:
            i0[ax] = m - 2
        frac[ax] = t - i0[ax]
    for corner in range(1 << n):
        weight = 1.0
        flat = 0
        stride = 1
        for ax in range(n - 1, -1, -1):
            bit = (corner >> ax) & 1
            flat = flat + (i0[ax] + bit) * stride
            stride = stride * m
            if bit:
                weight = weight * frac[ax]
            else:
                weight = weight * (1.0 - frac[ax])
        for c in range(k):
            o[w, c] = o[w, c] + weight * f[c, flat]


def interp_fields(const double[:, ::1] chi, fields, double L, int m, int threads=1):
    cdef int n = chi.shape[1]
    cdef int k = fields.shape[0]
    if n > 8:
        raise ValueError("interp_fields supports at most 8 sites")
    cdef const double[:, ::1] f = np.ascontiguousarray(fields, dtype=np.float64).reshape(k, -1)
    out = np.zeros((chi.shape[0], k), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double h = 2.0 * L / (m - 1)
    cdef int64_t w
    for w in prange(chi.shape[0], nogil=True, num_threads=threads, schedule="static"):
        _interp_one(chi, w, f, o, n, k, L, h, m)
    return out


def histogram(const double[:, ::1] chi, double L, int m):
    cdef int n = chi.shape[1]
    cdef int64_t size = 1
    cdef int ax
    for ax in range(n):
        size *= m
    counts = np.zeros(size, dtype=np.int64)
    cdef int64_t[::1] c = counts
    cdef double h = 2.0 * L / (m - 1)
    cdef int64_t w, flat, i
    for w in range(chi.shape[0]):
        flat = 0
        for ax in range(n):
            i = <int64_t>floor((chi[w, ax] + L) / h + 0.5)
            if i < 0:
                i = 0
            elif i > m - 1:
                i = m - 1
            flat = flat * m + i
        c[flat] += 1
    return counts.reshape((m,) * n)
