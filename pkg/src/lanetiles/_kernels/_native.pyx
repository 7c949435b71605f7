# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; mirrors lanetiles._kernels._reference exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def polyline_min_dist(queries, polyline):
    """Minimum Euclidean distance from each query point to a 2D polyline."""
    q = np.ascontiguousarray(queries, dtype=np.float64)
    p = np.ascontiguousarray(polyline, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2 or p.shape[1] != 2:
        raise ValueError("polyline must have shape (M, 2) with M >= 2")

    cdef double[:, ::1] qv = q
    cdef double[:, ::1] pv = p
    cdef Py_ssize_t n = qv.shape[0]
    cdef Py_ssize_t m = pv.shape[0] - 1
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out

    cdef Py_ssize_t i, k
    cdef double qx, qy, ax, ay, vx, vy, wx, wy, vv, t, dx, dy, d2, best
    for i in range(n):
        qx = qv[i, 0]
        qy = qv[i, 1]
        best = 1e300
        for k in range(m):
            ax = pv[k, 0]
            ay = pv[k, 1]
            vx = pv[k + 1, 0] - ax
            vy = pv[k + 1, 1] - ay
            vv = vx * vx + vy * vy
            if vv < 1e-300:
                vv = 1e-300
            wx = qx - ax
            wy = qy - ay
            t = (wx * vx + wy * vy) / vv
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            dx = wx - t * vx
            dy = wy - t * vy
            d2 = dx * dx + dy * dy
            if d2 < best:
                best = d2
        ov[i] = sqrt(best)
    return out


def mean_shift_iterate(points, double bandwidth, int max_iters, double tol):
    """Flat-kernel mean shift from every point over the fixed input set."""
    x = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t d = xv.shape[1]
    modes = x.copy()
    cdef double[:, ::1] mv = modes
    new = np.empty(d, dtype=np.float64)
    cdef double[::1] nv = new

    cdef double b2 = bandwidth * bandwidth
    cdef double tol2 = tol * tol
    cdef Py_ssize_t i, j, k, it, count
    cdef double d2, shift2, diff
    cdef char done
    for i in range(n):
        for it in range(max_iters):
            for k in range(d):
                nv[k] = 0.0
            count = 0
            for j in range(n):
                d2 = 0.0
                for k in range(d):
                    diff = mv[i, k] - xv[j, k]
                    d2 += diff * diff
                if d2 <= b2:
                    count += 1
                    for k in range(d):
                        nv[k] += xv[j, k]
            if count == 0:
                break
            shift2 = 0.0
            for k in range(d):
                nv[k] /= count
                diff = nv[k] - mv[i, k]
                shift2 += diff * diff
                mv[i, k] = nv[k]
            if shift2 < tol2:
                break
    return modes
