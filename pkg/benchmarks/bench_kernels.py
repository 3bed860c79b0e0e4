"""Benchmark the numba kernels against the pure-numpy fallback.

Usage:
    python benchmarks/bench_kernels.py [n] [dim]

Runs the duplicate-scan and clustering-label kernels on random unit vectors
under both backends and prints the timings. The numba path is selected by
default; TPGO_DISABLE_NUMBA=1 switches the package to the numpy path at
import, but this script calls both implementations directly so one run
covers both.
"""

from __future__ import annotations

import sys
import time

import numpy as np

from tpgo import kernels


def random_unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    raw = rng.normal(size=(n, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def timed(fn, *args, repeats: int = 3) -> tuple[float, object]:
    best = float("inf")
    result = None
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - start)
    return best, result


def main() -> None:
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
    dim = int(sys.argv[2]) if len(sys.argv) > 2 else 64
    rng = np.random.default_rng(7)
    sim = kernels.pairwise_cosine(random_unit_rows(rng, n, dim))

    print(f"n={n} dim={dim} (active backend: {kernels.active_backend()})")
    print(f"{'kernel':<16} {'numpy':>12} {'numba':>12} {'speedup':>9}")

    # Warm-up pays the one-off JIT compile so timings compare steady state.
    kernels._dedupe_numba(sim[:8, :8], 0.9)
    kernels._dbscan_numba(sim[:8, :8], 0.3, 2)

    t_np, keep_np = timed(kernels._dedupe_numpy, sim, 0.9)
    t_nb, keep_nb = timed(kernels._dedupe_numba, sim, 0.9)
    assert np.array_equal(keep_np, keep_nb)
    print(f"{'dedupe-scan':<16} {t_np:>10.4f}s {t_nb:>10.4f}s {t_np / t_nb:>8.1f}x")

    t_np, out_np = timed(kernels._dbscan_numpy, sim, 0.3, 2)
    t_nb, out_nb = timed(kernels._dbscan_numba, sim, 0.3, 2)
    assert np.array_equal(out_np[0], out_nb[0]) and np.array_equal(out_np[1], out_nb[1])
    print(f"{'cluster-labels':<16} {t_np:>10.4f}s {t_nb:>10.4f}s {t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
