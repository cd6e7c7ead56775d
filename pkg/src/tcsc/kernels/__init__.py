"""Hot inner loops, dispatched to numba or pure numpy.

The backend is chosen once at import time from ``TCSC_BACKEND``
(``numba``, the default, or ``numpy``). If numba cannot be imported the
numpy path is used with a warning.
"""
import os
import warnings

from . import _numpy

BACKEND = os.environ.get("TCSC_BACKEND", "numba").strip().lower()
if BACKEND not in ("numba", "numpy"):
    raise ImportError(f"TCSC_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")

if BACKEND == "numba":
    try:
        from . import _numba as _impl
    except ImportError:  # pragma: no cover - numba is a declared dependency
        warnings.warn("numba unavailable, falling back to the numpy kernels")
        BACKEND = "numpy"
        _impl = _numpy
else:
    _impl = _numpy

pixel_diffs = _impl.pixel_diffs
descend_forest = _impl.descend_forest
gather_sum = _impl.gather_sum
gather_sum_codebook = _impl.gather_sum_codebook
scatter_add = _impl.scatter_add

__all__ = [
    "BACKEND",
    "pixel_diffs",
    "descend_forest",
    "gather_sum",
    "gather_sum_codebook",
    "scatter_add",
]
