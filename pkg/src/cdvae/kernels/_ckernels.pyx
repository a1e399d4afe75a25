# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops for patch extraction and bilinear sampling.

Array layouts match :mod:`cdvae.kernels._numpy` exactly; both modules are
tested against each other.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor

cnp.import_array()


cdef inline (Py_ssize_t, Py_ssize_t) _span(Py_ssize_t j, int stride, int pad, Py_ssize_t W, Py_ssize_t Wo):
    """Output columns ``ow`` whose input column ``ow*stride - pad + j`` lies inside ``[0, W)``."""
    cdef Py_ssize_t lo = 0, hi
    if pad > j:
        lo = (pad - j + stride - 1) // stride
    hi = (W - 1 + pad - j) // stride + 1 if W - 1 + pad - j >= 0 else 0
    if hi > Wo:
        hi = Wo
    if lo > hi:
        lo = hi
    return lo, hi


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((C * kh * kw, N * Ho * Wo), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, n, oh, ow, row, col, ih, lo, hi
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                lo, hi = _span(j, stride, pad, W, Wo)
                for n in range(N):
                    for oh in range(Ho):
                        ih = oh * stride - pad + i
                        if ih < 0 or ih >= H:
                            continue
                        col = (n * Ho + oh) * Wo
                        for ow in range(lo, hi):
                            out[row, col + ow] = x[n, c, ih, ow * stride - pad + j]
    return out_arr


def col2im(floating[:, ::1] cols, tuple shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((N, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, n, oh, ow, row, col, ih, lo, hi
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                lo, hi = _span(j, stride, pad, W, Wo)
                for n in range(N):
                    for oh in range(Ho):
                        ih = oh * stride - pad + i
                        if ih < 0 or ih >= H:
                            continue
                        col = (n * Ho + oh) * Wo
                        for ow in range(lo, hi):
                            out[n, c, ih, ow * stride - pad + j] += cols[row, col + ow]
    return out_arr


def bilinear_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] px,
                     floating[:, :, :, ::1] py):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t K = px.shape[1], Ho = px.shape[2], Wo = px.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((N, C, K, Ho, Wo), dtype=dtype)
    cdef floating[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, k, oh, ow, c, x0, y0
    cdef double X, Y, fx, fy, w00, w01, w10, w11, acc
    cdef bint v00, v01, v10, v11
    for n in range(N):
        for k in range(K):
            for oh in range(Ho):
                for ow in range(Wo):
                    X = px[n, k, oh, ow]
                    Y = py[n, k, oh, ow]
                    if X <= -1.0 or Y <= -1.0 or X >= W or Y >= H:
                        continue
                    fx = floor(X)
                    fy = floor(Y)
                    x0 = <Py_ssize_t>fx
                    y0 = <Py_ssize_t>fy
                    fx = X - fx
                    fy = Y - fy
                    w00 = (1.0 - fy) * (1.0 - fx)
                    w01 = (1.0 - fy) * fx
                    w10 = fy * (1.0 - fx)
                    w11 = fy * fx
                    v00 = y0 >= 0 and x0 >= 0
                    v01 = y0 >= 0 and x0 + 1 < W
                    v10 = y0 + 1 < H and x0 >= 0
                    v11 = y0 + 1 < H and x0 + 1 < W
                    for c in range(C):
                        acc = 0.0
                        if v00:
                            acc = acc + w00 * x[n, c, y0, x0]
                        if v01:
                            acc = acc + w01 * x[n, c, y0, x0 + 1]
                        if v10:
                            acc = acc + w10 * x[n, c, y0 + 1, x0]
                        if v11:
                            acc = acc + w11 * x[n, c, y0 + 1, x0 + 1]
                        out[n, c, k, oh, ow] = acc
    return out_arr


def bilinear_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] px,
                      floating[:, :, :, ::1] py, floating[:, :, :, :, ::1] gout):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t K = px.shape[1], Ho = px.shape[2], Wo = px.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((N, C, H, W), dtype=dtype)
    gpx_arr = np.zeros((N, K, Ho, Wo), dtype=dtype)
    gpy_arr = np.zeros((N, K, Ho, Wo), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef floating[:, :, :, ::1] gpx = gpx_arr
    cdef floating[:, :, :, ::1] gpy = gpy_arr
    cdef Py_ssize_t n, k, oh, ow, c, x0, y0
    cdef double X, Y, fx, fy, g, a00, a01, a10, a11, sx, sy
    cdef bint v00, v01, v10, v11
    for n in range(N):
        for k in range(K):
            for oh in range(Ho):
                for ow in range(Wo):
                    X = px[n, k, oh, ow]
                    Y = py[n, k, oh, ow]
                    if X <= -1.0 or Y <= -1.0 or X >= W or Y >= H:
                        continue
                    fx = floor(X)
                    fy = floor(Y)
                    x0 = <Py_ssize_t>fx
                    y0 = <Py_ssize_t>fy
                    fx = X - fx
                    fy = Y - fy
                    v00 = y0 >= 0 and x0 >= 0
                    v01 = y0 >= 0 and x0 + 1 < W
                    v10 = y0 + 1 < H and x0 >= 0
                    v11 = y0 + 1 < H and x0 + 1 < W
                    sx = 0.0
                    sy = 0.0
                    for c in range(C):
                        g = gout[n, c, k, oh, ow]
                        if g == 0.0:
                            continue
                        a00 = x[n, c, y0, x0] if v00 else 0.0
                        a01 = x[n, c, y0, x0 + 1] if v01 else 0.0
                        a10 = x[n, c, y0 + 1, x0] if v10 else 0.0
                        a11 = x[n, c, y0 + 1, x0 + 1] if v11 else 0.0
                        if v00:
                            gx[n, c, y0, x0] += g * (1.0 - fy) * (1.0 - fx)
                        if v01:
                            gx[n, c, y0, x0 + 1] += g * (1.0 - fy) * fx
                        if v10:
                            gx[n, c, y0 + 1, x0] += g * fy * (1.0 - fx)
                        if v11:
                            gx[n, c, y0 + 1, x0 + 1] += g * fy * fx
                        sx = sx + g * ((1.0 - fy) * (a01 - a00) + fy * (a11 - a10))
                        sy = sy + g * ((1.0 - fx) * (a10 - a00) + fx * (a11 - a01))
                    gpx[n, k, oh, ow] = sx
                    gpy[n, k, oh, ow] = sy
    return gx_arr, gpx_arr, gpy_arr
