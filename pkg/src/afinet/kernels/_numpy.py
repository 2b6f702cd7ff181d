"""Pure-numpy convolution kernels (fallback when the extension is absent).

Column layout shared with the compiled kernels: one row per output pixel
ordered (b, ho, wo), one column per input tap ordered (c, i, j).  Both
backends produce bitwise-identical columns and accumulate col2im in the
same (i, j) order, so results agree exactly.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    B, C, H, W = x.shape
    Ho, Wo = out_size(H, k, stride, pad), out_size(W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)


def col2im(cols, x_shape, k, stride, pad):
    B, C, H, W = x_shape
    Ho, Wo = out_size(H, k, stride, pad), out_size(W, k, stride, pad)
    d = cols.reshape(B, Ho, Wo, C, k, k)
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += \
                d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pad:pad + H, pad:pad + W].copy() if pad else dxp


def conv2d_direct(x, w, stride, pad, groups):
    """Shift-and-accumulate direct convolution; the reference path."""
    B, C, H, W = x.shape
    Cout, cg, k, _ = w.shape
    og = Cout // groups
    Ho, Wo = out_size(H, k, stride, pad), out_size(W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((B, Cout, Ho, Wo), dtype=np.result_type(x, w))
    for g in range(groups):
        xg = xp[:, g * cg:(g + 1) * cg]
        wg = w[g * og:(g + 1) * og]
        for i in range(k):
            for j in range(k):
                patch = xg[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
                out[:, g * og:(g + 1) * og] += np.einsum("bchw,oc->bohw", patch, wg[:, :, i, j])
    return out
