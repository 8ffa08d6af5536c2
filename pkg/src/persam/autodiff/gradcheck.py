"""Central finite differences, the oracle for every backward rule."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad

# below this magnitude, entries are compared on an absolute scale
REL_FLOOR = 1e-5


def numerical_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-6,
                   index: np.ndarray | None = None) -> np.ndarray:
    """d f() / d param by central differences, perturbing ``param.data`` in place.

    ``index`` restricts the probe to a subset of flat positions; the rest of the
    returned array is NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if index is None else index
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor), ignoring NaN probes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(n)
    if not mask.any():
        return 0.0
    a, n = a[mask], n[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
