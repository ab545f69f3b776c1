"""Hot inner loops with two interchangeable backends.

The backend is picked once at import from ``DCAMA_BACKEND`` (``numba`` or
``numpy``). Without the variable, numba is used when it imports cleanly.
"""

import importlib
import os

from . import _numpy

BACKENDS = ("numba", "numpy")


def get_backend(name):
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; expected one of {BACKENDS}")
    if name == "numpy":
        return _numpy
    return importlib.import_module(f"{__name__}._numba")


def _select():
    requested = os.environ.get("DCAMA_BACKEND", "").strip().lower()
    if requested:
        return get_backend(requested)
    try:
        return get_backend("numba")
    except ImportError:
        return _numpy


_active = _select()
BACKEND = _active.NAME

im2col = _active.im2col
col2im = _active.col2im
resize_forward = _active.resize_forward
resize_backward = _active.resize_backward
softmax_rows = _active.softmax_rows
histogram256 = _active.histogram256
confusion = _active.confusion
interp_matrix = _numpy.interp_matrix

__all__ = [
    "BACKEND",
    "BACKENDS",
    "get_backend",
    "im2col",
    "col2im",
    "resize_forward",
    "resize_backward",
    "softmax_rows",
    "histogram256",
    "confusion",
    "interp_matrix",
]
