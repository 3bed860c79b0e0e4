"""Numeric kernels for similarity filtering and density clustering.

The two hot loops in the pipeline are the greedy near-duplicate scan and the
density-clustering label assignment. Both are sequential, data-dependent
loops over a precomputed similarity matrix, so they get numba ``@njit``
versions with a pure-numpy fallback. The backend is chosen once at import:
set ``TPGO_DISABLE_NUMBA=1`` to force the numpy path. Both paths consume the
same precomputed float matrix and apply the same comparisons, so their
outputs are bit-identical.

``benchmarks/bench_kernels.py`` compares the two backends.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = "TPGO_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(_ENV_FLAG, "").strip().lower() not in ("1", "true", "yes")


try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


_USE_NUMBA = _HAVE_NUMBA and _numba_requested()


def active_backend() -> str:
    """Name of the backend selected at import time."""
    return "numba" if _USE_NUMBA else "numpy"


def pairwise_cosine(matrix: np.ndarray) -> np.ndarray:
    """Cosine similarity matrix for rows of unit-normalized ``matrix``."""
    m = np.asarray(matrix, dtype=np.float64)
    return m @ m.T


# ---------------------------------------------------------------------------
# Greedy near-duplicate scan.
#
# Items are scanned in input order; item i is merged into the first kept item
# whose similarity is >= threshold, otherwise kept. Returns one int per item:
# -1 for kept, else the index of the kept item it merged into.
# ---------------------------------------------------------------------------


def _dedupe_numpy(sim: np.ndarray, threshold: float) -> np.ndarray:
    n = sim.shape[0]
    merge_into = np.full(n, -1, dtype=np.int64)
    kept: list[int] = []
    for i in range(n):
        target = -1
        for k in kept:
            if sim[i, k] >= threshold:
                target = k
                break
        if target >= 0:
            merge_into[i] = target
        else:
            kept.append(i)
    return merge_into


@njit(cache=True)
def _dedupe_numba(sim: np.ndarray, threshold: float) -> np.ndarray:  # pragma: no cover - parity-tested
    n = sim.shape[0]
    merge_into = np.full(n, -1, dtype=np.int64)
    kept = np.empty(n, dtype=np.int64)
    n_kept = 0
    for i in range(n):
        target = -1
        for j in range(n_kept):
            k = kept[j]
            if sim[i, k] >= threshold:
                target = k
                break
        if target >= 0:
            merge_into[i] = target
        else:
            kept[n_kept] = i
            n_kept += 1
    return merge_into


def greedy_dedupe(sim: np.ndarray, threshold: float) -> np.ndarray:
    """Run the greedy duplicate scan on a similarity matrix."""
    sim = np.ascontiguousarray(sim, dtype=np.float64)
    if _USE_NUMBA:
        return _dedupe_numba(sim, float(threshold))
    return _dedupe_numpy(sim, float(threshold))


# ---------------------------------------------------------------------------
# Density clustering labels.
#
# Distance is 1 - cosine similarity. A point is core iff its eps-neighborhood
# (including itself) holds at least min_samples points. Core points connected
# through eps-reachability share a label; labels are assigned by scanning core
# points in input order. Non-core points join the cluster of the lowest-index
# core point within eps, or stay -1 (noise).
# ---------------------------------------------------------------------------


def _dbscan_numpy(sim: np.ndarray, eps: float, min_samples: int) -> tuple[np.ndarray, np.ndarray]:
    n = sim.shape[0]
    reach = (1.0 - sim) <= eps
    core = reach.sum(axis=1) >= min_samples
    labels = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = next_label
        queue = [i]
        while queue:
            u = queue.pop(0)
            for v in range(n):
                if core[v] and labels[v] == -1 and reach[u, v]:
                    labels[v] = next_label
                    queue.append(v)
        next_label += 1
    for i in range(n):
        if core[i]:
            continue
        for j in range(n):
            if core[j] and reach[i, j]:
                labels[i] = labels[j]
                break
    return labels, core


@njit(cache=True)
def _dbscan_numba(sim: np.ndarray, eps: float, min_samples: int) -> tuple[np.ndarray, np.ndarray]:  # pragma: no cover - parity-tested
    n = sim.shape[0]
    reach = np.empty((n, n), dtype=np.bool_)
    for i in range(n):
        for j in range(n):
            reach[i, j] = (1.0 - sim[i, j]) <= eps
    core = np.empty(n, dtype=np.bool_)
    for i in range(n):
        count = 0
        for j in range(n):
            if reach[i, j]:
                count += 1
        core[i] = count >= min_samples
    labels = np.full(n, -1, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    next_label = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = next_label
        queue[0] = i
        head = 0
        tail = 1
        while head < tail:
            u = queue[head]
            head += 1
            for v in range(n):
                if core[v] and labels[v] == -1 and reach[u, v]:
                    labels[v] = next_label
                    queue[tail] = v
                    tail += 1
        next_label += 1
    for i in range(n):
        if core[i]:
            continue
        for j in range(n):
            if core[j] and reach[i, j]:
                labels[i] = labels[j]
                break
    return labels, core


def dbscan_labels(sim: np.ndarray, eps: float, min_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Label rows of a similarity matrix; returns (labels, core mask)."""
    sim = np.ascontiguousarray(sim, dtype=np.float64)
    if _USE_NUMBA:
        return _dbscan_numba(sim, float(eps), int(min_samples))
    return _dbscan_numpy(sim, float(eps), int(min_samples))


def medoid_index(sim: np.ndarray) -> int:
    """Index of the row maximizing summed similarity; first index wins ties."""
    sums = np.asarray(sim, dtype=np.float64).sum(axis=1)
    return int(np.argmax(sums))
