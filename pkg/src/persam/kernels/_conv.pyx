# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Direct-loop conv2d kernels (NHWC activations, OIHW weights).

Weights are transposed once to (kh, kw, in, out) so the innermost loops run
over contiguous output channels.
"""

import numpy as np
cimport cython
from cython cimport floating


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   floating[::1] b, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if w.shape[1] != c:
        raise ValueError("conv2d channel mismatch: input channels %d, weight expects %d"
                         % (c, w.shape[1]))
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * pad - kw) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    wt_arr = np.ascontiguousarray(np.transpose(np.asarray(w), (2, 3, 1, 0)))
    cdef floating[:, :, :, ::1] wt = wt_arr
    out = np.empty((n, oh, ow, o), dtype=dtype)
    cdef floating[:, :, :, ::1] y = out
    cdef Py_ssize_t bi, i, j, oc, ic, p, q, yi, xj
    cdef floating xv
    with nogil:
        for bi in range(n):
            for i in range(oh):
                for j in range(ow):
                    for oc in range(o):
                        y[bi, i, j, oc] = b[oc]
                    for p in range(kh):
                        yi = i * stride + p - pad
                        if yi < 0 or yi >= h:
                            continue
                        for q in range(kw):
                            xj = j * stride + q - pad
                            if xj < 0 or xj >= wd:
                                continue
                            for ic in range(c):
                                xv = x[bi, yi, xj, ic]
                                for oc in range(o):
                                    y[bi, i, j, oc] += xv * wt[p, q, ic, oc]
    return out


def conv2d_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                    floating[:, :, :, ::1] gy, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = gy.shape[1], ow = gy.shape[2]
    dtype = np.float64 if floating is double else np.float32
    wt_arr = np.ascontiguousarray(np.transpose(np.asarray(w), (2, 3, 1, 0)))
    cdef floating[:, :, :, ::1] wt = wt_arr
    gx_arr = np.zeros((n, h, wd, c), dtype=dtype)
    gwt_arr = np.zeros((kh, kw, c, o), dtype=dtype)
    gb_arr = np.zeros(o, dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef floating[:, :, :, ::1] gwt = gwt_arr
    cdef floating[::1] gb = gb_arr
    cdef Py_ssize_t bi, i, j, oc, ic, p, q, yi, xj
    cdef floating xv, acc
    with nogil:
        for bi in range(n):
            for i in range(oh):
                for j in range(ow):
                    for oc in range(o):
                        gb[oc] += gy[bi, i, j, oc]
                    for p in range(kh):
                        yi = i * stride + p - pad
                        if yi < 0 or yi >= h:
                            continue
                        for q in range(kw):
                            xj = j * stride + q - pad
                            if xj < 0 or xj >= wd:
                                continue
                            for ic in range(c):
                                xv = x[bi, yi, xj, ic]
                                acc = 0
                                for oc in range(o):
                                    gwt[p, q, ic, oc] += xv * gy[bi, i, j, oc]
                                    acc = acc + gy[bi, i, j, oc] * wt[p, q, ic, oc]
                                gx[bi, yi, xj, ic] += acc
    gw_arr = np.ascontiguousarray(np.transpose(gwt_arr, (3, 2, 0, 1)))
    return gx_arr, gw_arr, gb_arr
