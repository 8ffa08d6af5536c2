"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension (``persam.kernels._conv``) is used when it was built
and importable; otherwise the numpy implementations in ``_reference`` are
used. Setting ``PERSAM_PURE_PYTHON=1`` forces the fallback.

Attributes
----------
BACKEND : str
    ``"compiled"`` or ``"numpy"``.
"""

import os

import numpy as np

from . import _reference

_compiled = None
if os.environ.get("PERSAM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _conv as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "numpy"


def conv2d_forward(x, w, b, stride, pad):
    if _compiled is not None and x.dtype == w.dtype == b.dtype:
        return _compiled.conv2d_forward(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(b), stride, pad
        )
    return _reference.conv2d_forward(x, w, b, stride, pad)


def conv2d_backward(x, w, gy, stride, pad):
    if _compiled is not None and x.dtype == w.dtype == gy.dtype:
        return _compiled.conv2d_backward(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(gy), stride, pad
        )
    return _reference.conv2d_backward(x, w, gy, stride, pad)


__all__ = ["BACKEND", "conv2d_forward", "conv2d_backward"]
