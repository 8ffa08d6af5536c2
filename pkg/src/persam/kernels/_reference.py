"""Pure-numpy conv2d kernels (NHWC activations, OIHW weights).

These are the fallback used when the compiled extension is unavailable, and
the reference the compiled kernels are tested against.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _windows(x, kh, kw, stride, pad):
    # (N, OH, OW, C, kh, kw) view over the padded input
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d_forward(x, w, b, stride, pad):
    """Return ``y[n, i, j, o] = b[o] + sum w[o, c, p, q] x[n, i*s+p-pad, j*s+q-pad, c]``."""
    n, h, wd, c = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    win = _windows(x, kh, kw, stride, pad)
    oh, ow = win.shape[1], win.shape[2]
    cols = win.reshape(n * oh * ow, c * kh * kw)
    y = cols @ w.reshape(o, c * kh * kw).T
    y += b
    return y.reshape(n, oh, ow, o)


def conv2d_backward(x, w, gy, stride, pad):
    """Gradients ``(gx, gw, gb)`` of a conv2d given the upstream gradient ``gy``."""
    n, h, wd, c = x.shape
    o, _, kh, kw = w.shape
    oh, ow = gy.shape[1], gy.shape[2]
    win = _windows(x, kh, kw, stride, pad)
    cols = win.reshape(n * oh * ow, c * kh * kw)
    g2 = gy.reshape(n * oh * ow, o)
    gw = (g2.T @ cols).reshape(o, c, kh, kw)
    gb = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(o, c * kh * kw)).reshape(n, oh, ow, c, kh, kw)
    gxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=x.dtype)
    for p in range(kh):
        for q in range(kw):
            gxp[:, p:p + stride * oh:stride, q:q + stride * ow:stride, :] += gcols[..., p, q]
    gx = gxp[:, pad:pad + h, pad:pad + wd, :]
    return np.ascontiguousarray(gx), gw, gb
