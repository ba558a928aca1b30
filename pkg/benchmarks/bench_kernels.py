"""Time the compiled walker kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--walkers 200000] [--sites 1] [--repeat 5]

Prints the best-of-``repeat`` wall time per kernel and backend, the speedup,
and the largest difference between the two backends' outputs.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from edlab import kernels


def best_time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--walkers", type=int, default=200_000)
    p.add_argument("--sites", type=int, default=1)
    p.add_argument("--points", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the numpy fallback can be timed")
    backends = ["numpy"] + (["cython"] if kernels.BACKEND == "cython" else [])
    M, n, m, L = args.walkers, args.sites, args.points, 8.0
    rng = np.random.default_rng(0)
    chi = rng.normal(scale=2.0, size=(M, n))
    fields = rng.normal(size=(n,) + (m,) * n)

    cases = {
        "normals": lambda b: kernels.normals(1234, 7, 0, M, n, backend=b),
        "interp_fields": lambda b: kernels.interp_fields(chi, fields, L, m, backend=b),
        "histogram": lambda b: kernels.histogram(chi, L, m, backend=b),
    }
    print(f"walkers={M} sites={n} points_per_axis={m} threads={kernels.thread_count()}")
    print(f"{'kernel':<15}" + "".join(f"{b + ' [ms]':>14}" for b in backends) + f"{'speedup':>10}{'max diff':>12}")
    for name, fn in cases.items():
        times, outs = [], []
        for b in backends:
            t, out = best_time(lambda: fn(b), args.repeat)
            times.append(t)
            outs.append(np.asarray(out, dtype=float))
        speed = times[0] / times[-1]
        diff = float(np.max(np.abs(outs[0] - outs[-1])))
        print(f"{name:<15}" + "".join(f"{1e3 * t:>14.2f}" for t in times) + f"{speed:>10.1f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
