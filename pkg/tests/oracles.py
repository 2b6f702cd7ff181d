"""Slow, obviously-correct reference implementations used only by tests."""

import numpy as np


def conv2d_loops(x, w, stride=1, pad=0, groups=1):
    """Six nested loops over (b, o, i, j, c, di, dj) in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, C, H, W = x.shape
    O, Cg, k, _ = w.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    og = O // groups
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            g = o // og
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(Cg):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, g * Cg + c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[b, o, i, j] = acc
    return out


def batch_norm_reference(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * np.reshape(gamma, (1, -1, 1, 1)) + np.reshape(beta, (1, -1, 1, 1))


def afi_reference(stack, w1, w2):
    """Per-sample, per-channel loop version of the attention mix."""
    X = np.stack([np.asarray(s, dtype=np.float64) for s in stack])  # N, B, C, H, W
    N, B, C = X.shape[:3]
    R = np.zeros(X.shape[1:])
    weights = np.zeros((N, B, C))
    for b in range(B):
        scores = np.zeros((N, C))
        for n in range(N):
            z = X[n, b].mean(axis=(1, 2))
            hidden = np.maximum(w1 @ z, 0.0)
            scores[n] = w2 @ hidden
        for c in range(C):
            e = np.exp(scores[:, c] - scores[:, c].max())
            a = e / e.sum()
            weights[:, b, c] = a
            for n in range(N):
                R[b, c] += a[n] * X[n, b, c]
    return R, weights


def scoring_flops_by_sum(n, channels, r):
    """Count scoring multiplications one at a time.

    Blocks i = 3..n+1 of a stage each score their i - 1 input features;
    every feature passes through a Cb x C and a C x Cb map.
    """
    cb = max(1, channels // r)
    total = 0
    for i in range(3, n + 2):
        for _feature in range(i - 1):
            for _ in range(cb):
                total += channels  # hidden unit: dot product over C channels
            for _ in range(channels):
                total += cb  # output score: dot product over Cb hidden units
    return total
