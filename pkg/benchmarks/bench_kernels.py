"""Compare the numba and numpy kernel backends on the wrap19 neighborhoods.

    python3 benchmarks/bench_kernels.py [--reps 20] [--dim 38]

Both backends are imported directly, so one process times both. The first
numba call per kernel is timed separately (compile or cache load).
"""

import argparse
import time

import numpy as np

from ncl.graph import build_topology
from ncl.kernels import _numba, _numpy


def csr(g):
    ptr, idx = [0], []
    for i in range(g.n):
        idx += sorted(g.closed_neighborhood(i))
        ptr.append(len(idx))
    return np.array(ptr, dtype=np.int64), np.array(idx, dtype=np.int64)


def timeit(fn, reps):
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--dim", type=int, default=38)
    args = ap.parse_args()

    g = build_topology("wrap19")
    ptr, idx = csr(g)
    rng = np.random.default_rng(0)
    Z = rng.chisquare(5, (g.n, args.dim))
    G = rng.standard_normal((g.n, args.dim))

    cases = {
        "neighborhood_max": lambda m: m.neighborhood_extreme(Z, ptr, idx, True),
        "grad_hull": lambda m: m.grad_hull(Z, ptr, idx, G, 0.9),
        "grad_cube": lambda m: m.grad_cube(Z, ptr, idx, G, 0.9),
    }
    print(f"{'kernel':<18}{'first numba':>14}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for name, fn in cases.items():
        t0 = time.perf_counter()
        fn(_numba)
        first = time.perf_counter() - t0
        tn = timeit(lambda: fn(_numba), args.reps)
        tp = timeit(lambda: fn(_numpy), max(1, args.reps // 4))
        print(f"{name:<18}{first:>13.3f}s{tn * 1e3:>10.3f}ms{tp * 1e3:>10.3f}ms{tp / tn:>9.1f}x")


if __name__ == "__main__":
    main()
