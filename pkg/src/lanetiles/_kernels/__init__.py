"""Hot-loop kernels with a compiled core and a numpy fallback.

The Cython extension ``_native`` is preferred when importable; setting
the environment variable ``LANETILES_PURE_PYTHON=1`` forces the numpy
reference implementations.  ``BACKEND`` records which one is active.
"""

from __future__ import annotations

import os

from . import _reference

if os.environ.get("LANETILES_PURE_PYTHON"):
    _impl = _reference
    BACKEND = "reference"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        _impl = _reference
        BACKEND = "reference"

polyline_min_dist = _impl.polyline_min_dist
mean_shift_iterate = _impl.mean_shift_iterate

__all__ = ["polyline_min_dist", "mean_shift_iterate", "BACKEND"]
