"""Exact top-k L2 search kernels.

Two interchangeable backends compute the same result: a numba ``@njit`` scan
(default when numba imports) and a pure-numpy fallback. Selection order:

1. ``set_backend("numba"|"numpy")`` from code,
2. the ``KNNMT_BACKEND`` environment variable (``numba``, ``numpy``, ``auto``),
3. ``auto``: numba if available, else numpy.

Both backends return squared distances ascending with ties broken by smaller
entry index. ``benchmarks/bench_kernels.py`` compares their speed.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


_FORCED: str | None = None


def set_backend(name: str | None) -> None:
    """Force a backend for this process ("numba", "numpy", or None for auto)."""
    global _FORCED
    if name is not None and name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend '{name}'")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _FORCED = name


def active_backend() -> str:
    """Name of the backend that topk_sq_l2 will use."""
    if _FORCED is not None:
        return _FORCED
    env = os.environ.get("KNNMT_BACKEND", "auto").lower()
    if env == "numpy":
        return "numpy"
    if env == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("KNNMT_BACKEND=numba but numba is not importable")
        return "numba"
    return "numba" if HAS_NUMBA else "numpy"


@njit(cache=True)
def _topk_numba(keys, queries, k):  # pragma: no cover - exercised via dispatch
    n, d = keys.shape
    m = queries.shape[0]
    out_idx = np.empty((m, k), dtype=np.int64)
    out_sq = np.empty((m, k), dtype=np.float64)
    for q in range(m):
        best_sq = np.full(k, np.inf)
        best_idx = np.full(k, -1, dtype=np.int64)
        for j in range(n):
            s = 0.0
            for c in range(d):
                diff = keys[j, c] - queries[q, c]
                s += diff * diff
            # strict '<' keeps the earlier index on exact distance ties
            if s < best_sq[k - 1]:
                pos = k - 1
                while pos > 0 and best_sq[pos - 1] > s:
                    best_sq[pos] = best_sq[pos - 1]
                    best_idx[pos] = best_idx[pos - 1]
                    pos -= 1
                best_sq[pos] = s
                best_idx[pos] = j
        out_idx[q] = best_idx
        out_sq[q] = best_sq
    return out_idx, out_sq


def _topk_numpy(keys: np.ndarray, queries: np.ndarray, k: int,
                block: int = 16) -> tuple[np.ndarray, np.ndarray]:
    m = queries.shape[0]
    out_idx = np.empty((m, k), dtype=np.int64)
    out_sq = np.empty((m, k), dtype=np.float64)
    for lo in range(0, m, block):
        hi = min(lo + block, m)
        diffs = keys[None, :, :] - queries[lo:hi, None, :]
        sq = np.einsum("qnd,qnd->qn", diffs, diffs)
        # stable sort keeps smaller entry indices first on exact ties
        order = np.argsort(sq, axis=1, kind="stable")[:, :k]
        out_idx[lo:hi] = order
        out_sq[lo:hi] = np.take_along_axis(sq, order, axis=1)
    return out_idx, out_sq


def topk_sq_l2(keys: np.ndarray, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k smallest squared L2 distances for each query row.

    Returns ``(indices, sq_distances)`` of shape (m, k), distances ascending,
    ties broken by smaller entry index.
    """
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if keys.ndim != 2 or queries.ndim != 2:
        raise ValueError("keys and queries must be 2-D")
    if keys.shape[1] != queries.shape[1]:
        raise ValueError(f"dimension mismatch: keys d={keys.shape[1]}, queries d={queries.shape[1]}")
    if not 1 <= k <= keys.shape[0]:
        raise ValueError(f"k={k} out of range for {keys.shape[0]} entries")
    if active_backend() == "numba":
        return _topk_numba(keys, queries, k)
    return _topk_numpy(keys, queries, k)
