"""Pure-numpy reference implementations of the hot kernels.

These are the import-time fallback when the compiled extension is not
available, and the ground truth the extension is tested against.
"""

from __future__ import annotations

import numpy as np

# Queries are chunked so the (chunk, segments) broadcast stays small.
_CHUNK_ELEMS = 2_000_000


def polyline_min_dist(queries: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Minimum Euclidean distance from each query point to a 2D polyline.

    queries: (N, 2) array; polyline: (M, 2) array with M >= 2.
    Returns (N,) distances to the nearest point on any segment.
    """
    queries = np.asarray(queries, dtype=np.float64)
    polyline = np.asarray(polyline, dtype=np.float64)
    if polyline.ndim != 2 or polyline.shape[0] < 2 or polyline.shape[1] != 2:
        raise ValueError("polyline must have shape (M, 2) with M >= 2")
    a = polyline[:-1]
    v = polyline[1:] - a
    vv = np.maximum((v * v).sum(axis=1), 1e-300)

    n = queries.shape[0]
    out = np.empty(n, dtype=np.float64)
    chunk = max(1, _CHUNK_ELEMS // a.shape[0])
    for start in range(0, n, chunk):
        q = queries[start : start + chunk]
        w = q[:, None, :] - a[None, :, :]
        t = np.clip((w * v).sum(axis=2) / vv, 0.0, 1.0)
        closest = a[None, :, :] + t[:, :, None] * v[None, :, :]
        d2 = ((q[:, None, :] - closest) ** 2).sum(axis=2)
        out[start : start + chunk] = np.sqrt(d2.min(axis=1))
    return out


def mean_shift_iterate(
    points: np.ndarray, bandwidth: float, max_iters: int, tol: float
) -> np.ndarray:
    """Run flat-kernel mean shift from every point over the fixed input set.

    Returns the (N, D) array of converged mode positions, one per input
    point (deduplication is left to the caller).
    """
    points = np.asarray(points, dtype=np.float64)
    modes = points.copy()
    active = np.ones(points.shape[0], dtype=bool)
    b2 = float(bandwidth) * float(bandwidth)
    for _ in range(max_iters):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        d2 = ((modes[idx, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        within = d2 <= b2
        counts = within.sum(axis=1)
        # window is never empty for modes reached from the data itself
        counts = np.maximum(counts, 1)
        new = (within[:, :, None] * points[None, :, :]).sum(axis=1) / counts[:, None]
        shift = np.sqrt(((new - modes[idx]) ** 2).sum(axis=1))
        modes[idx] = new
        active[idx[shift < tol]] = False
    return modes
