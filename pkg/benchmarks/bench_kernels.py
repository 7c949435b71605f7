"""Benchmark the compiled kernels against the numpy reference.

Run:  python benchmarks/bench_kernels.py
"""

from __future__ import annotations

import time

import numpy as np

from lanetiles._kernels import _reference as ref

try:
    from lanetiles._kernels import _native as native
except ImportError:
    native = None


def timeit(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_polyline():
    rng = np.random.default_rng(0)
    rows = []
    for n_q, n_p in ((6656, 80), (6656, 800), (100_000, 80)):
        q = rng.normal(0, 10, (n_q, 2))
        poly = np.cumsum(rng.normal(0, 1, (n_p, 2)), axis=0)
        t_ref = timeit(ref.polyline_min_dist, q, poly)
        t_nat = timeit(native.polyline_min_dist, q, poly) if native else float("nan")
        rows.append((f"polyline_min_dist {n_q}x{n_p}", t_ref, t_nat))
    return rows


def bench_mean_shift():
    rng = np.random.default_rng(1)
    rows = []
    for n in (150, 400, 1000):
        centers = rng.normal(0, 8, (6, 4))
        x = np.concatenate([c + rng.normal(0, 0.2, (n // 6 + 1, 4)) for c in centers])[:n]
        t_ref = timeit(ref.mean_shift_iterate, x, 1.5, 200, 1e-4)
        t_nat = (
            timeit(native.mean_shift_iterate, x, 1.5, 200, 1e-4) if native else float("nan")
        )
        rows.append((f"mean_shift_iterate n={n}", t_ref, t_nat))
    return rows


def main():
    print(f"native extension available: {native is not None}")
    print(f"{'kernel':38s} {'reference':>12s} {'native':>12s} {'speedup':>9s}")
    for name, t_ref, t_nat in bench_polyline() + bench_mean_shift():
        speed = t_ref / t_nat if t_nat == t_nat else float("nan")
        print(f"{name:38s} {t_ref * 1e3:10.2f}ms {t_nat * 1e3:10.2f}ms {speed:8.1f}x")


if __name__ == "__main__":
    main()
