# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.  Same layouts and accumulation order as
the numpy fallback in ``_numpy.py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _im2col(const real[:, :, :, ::1] x, real[:, ::1] out, int k, int stride, int pad,
                  int Ho, int Wo) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, i, j, ho, wo, row, col
    cdef Py_ssize_t hi, wi
    for b in range(B):
        for ho in range(Ho):
            for wo in range(Wo):
                row = (b * Ho + ho) * Wo + wo
                col = 0
                for c in range(C):
                    for i in range(k):
                        hi = ho * stride - pad + i
                        for j in range(k):
                            wi = wo * stride - pad + j
                            if 0 <= hi < H and 0 <= wi < W:
                                out[row, col] = x[b, c, hi, wi]
                            else:
                                out[row, col] = 0
                            col += 1


cdef void _col2im(const real[:, ::1] cols, real[:, :, :, ::1] dxp, int k, int stride,
                  int Ho, int Wo) noexcept nogil:
    cdef Py_ssize_t B = dxp.shape[0], C = dxp.shape[1]
    cdef Py_ssize_t b, c, i, j, ho, wo, col
    for b in range(B):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    col = (c * k + i) * k + j
                    for ho in range(Ho):
                        for wo in range(Wo):
                            dxp[b, c, ho * stride + i, wo * stride + j] += cols[(b * Ho + ho) * Wo + wo, col]


cdef void _direct(const real[:, :, :, ::1] xp, const real[:, :, :, ::1] w, real[:, :, :, ::1] out,
                  int stride, int groups) noexcept nogil:
    cdef Py_ssize_t B = out.shape[0], Cout = out.shape[1], Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t cg = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t og = Cout // groups
    cdef Py_ssize_t b, o, c, i, j, ho, wo, c0
    cdef real acc
    for b in range(B):
        for o in range(Cout):
            c0 = (o // og) * cg
            for ho in range(Ho):
                for wo in range(Wo):
                    acc = 0
                    for c in range(cg):
                        for i in range(k):
                            for j in range(k):
                                acc = acc + xp[b, c0 + c, ho * stride + i, wo * stride + j] * w[o, c, i, j]
                    out[b, o, ho, wo] = acc


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, int k, int stride, int pad):
    x = np.ascontiguousarray(x)
    B, C, H, W = x.shape
    Ho, Wo = out_size(H, k, stride, pad), out_size(W, k, stride, pad)
    out = np.empty((B * Ho * Wo, C * k * k), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, out, k, stride, pad, Ho, Wo)
    else:
        _im2col[double](x, out, k, stride, pad, Ho, Wo)
    return out


def col2im(cols, x_shape, int k, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    B, C, H, W = x_shape
    Ho, Wo = out_size(H, k, stride, pad), out_size(W, k, stride, pad)
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, dxp, k, stride, Ho, Wo)
    else:
        _col2im[double](cols, dxp, k, stride, Ho, Wo)
    return dxp[:, :, pad:pad + H, pad:pad + W].copy() if pad else dxp


def conv2d_direct(x, w, int stride, int pad, int groups):
    dtype = np.result_type(x, w)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = np.ascontiguousarray(xp, dtype=dtype)
    w = np.ascontiguousarray(w, dtype=dtype)
    B, C, H, W = x.shape
    k = w.shape[2]
    out = np.empty((B, w.shape[0], out_size(H, k, stride, pad), out_size(W, k, stride, pad)), dtype=dtype)
    if dtype == np.float32:
        _direct[float](xp, w, out, stride, groups)
    else:
        _direct[double](xp, w, out, stride, groups)
    return out
