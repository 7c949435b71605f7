"""Central finite-difference gradient oracle shared by loss/model tests."""

from __future__ import annotations

import numpy as np


def fd_gradcheck(fn, arrays, arg_names, n_points=30, h=1e-5, rtol=1e-4, seed=0):
    """Check analytic gradients of fn(arrays) against central differences.

    fn takes the dict of arrays and returns an object with .value and
    .grads; arg_names selects which entries to perturb.  Points are
    sampled uniformly over each array's coordinates.
    """
    rng = np.random.default_rng(seed)
    out = fn(arrays)
    worst = 0.0
    for name in arg_names:
        arr = arrays[name]
        flat = arr.ravel()
        gflat = np.asarray(out.grads[name]).ravel()
        idxs = rng.choice(flat.size, size=min(n_points, flat.size), replace=False)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            hi = fn(arrays).value
            flat[idx] = orig - h
            lo = fn(arrays).value
            flat[idx] = orig
            fd = (hi - lo) / (2.0 * h)
            denom = max(abs(fd), abs(gflat[idx]), 1e-6)
            rel = abs(fd - gflat[idx]) / denom
            worst = max(worst, rel)
            assert rel < rtol, f"{name}[{idx}]: analytic {gflat[idx]}, fd {fd}, rel {rel}"
    return worst
