"""Differentiable primitives.

Every op takes and returns :class:`~afinet.tensor.Tensor` objects and
works in whatever floating dtype its inputs carry.  Backward rules are
closures over the forward intermediates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DataError, DimensionError, NumericError
from .tensor import Tensor, emit, report_cost

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ----------------------------------------------------------------------------
# elementwise / structural


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return emit("add", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return emit("mul", out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return emit("scale", x.data * f, (x,), lambda g: (g * f,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.dtype.type(0))
    return emit("relu", out, (x,), lambda g: (g * (out > 0),))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.asarray(x.data.sum(axis=axis))
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return emit("sum", out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {orig} to {tuple(shape)}") from None
    return emit("reshape", out, (x,), lambda g: (g.reshape(orig),))


def select(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return emit("select", out, (x,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} do not conform")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return emit("concat", out, tensors, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError(f"concat_channels expects 4-d operands, got {a.shape} and {b.shape}")
    return concat((a, b), axis=1)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("stack of an empty list")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise DimensionError(f"stack: shapes {tensors[0].shape} and {t.shape} differ")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return emit("stack", out, tensors, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects B x C x H x W, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    inv = x.dtype.type(1.0 / (H * W))

    def backward(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),)

    return emit("global_avg_pool", out, (x,), backward)


# ----------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation with zero padding and no bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    B, Cin, H, W = x.shape
    Cout, cg, k, k2 = w.shape
    if groups < 1 or Cin % groups or Cout % groups:
        raise ConfigError(f"conv2d: groups={groups} must divide Cin={Cin} and Cout={Cout}")
    if cg * groups != Cin:
        raise DimensionError(f"conv2d: kernel expects {cg * groups} input channels, input has {Cin}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} / pad={pad}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: {k}x{k} kernel does not fit a {H}x{W} input with pad {pad}")

    og = Cout // groups
    K = cg * k * k
    cols = kernels.im2col(x.data, k, stride, pad)
    R = cols.shape[0]
    if groups == 1:
        wm = w.data.reshape(Cout, K)
        out = cols @ wm.T
    else:
        wg = w.data.reshape(groups, og, K)
        colsg = cols.reshape(R, groups, K).transpose(1, 0, 2)
        out = np.matmul(colsg, wg.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(R, Cout)
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))
    report_cost("conv", k * k * cg * Cout * Ho * Wo * B)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(R, Cout)
        gx = gw = None
        if groups == 1:
            if w.requires_grad:
                gw = (gm.T @ cols).reshape(w.shape)
            if x.requires_grad:
                gx = kernels.col2im(gm @ wm, x.shape, k, stride, pad)
        else:
            gmg = gm.reshape(R, groups, og).transpose(1, 0, 2)
            if w.requires_grad:
                gw = np.matmul(gmg.transpose(0, 2, 1), colsg).reshape(w.shape)
            if x.requires_grad:
                dcols = np.matmul(gmg, wg).transpose(1, 0, 2).reshape(R, groups * K)
                gx = kernels.col2im(dcols, x.shape, k, stride, pad)
        return gx, gw

    return emit("conv2d", out, (x, w), backward)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats | None,
               training: bool = True, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization over (B, H, W).

    Running variance is updated with the unbiased batch variance.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects B x C x H x W, got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({C},)")
    n = B * H * W
    gs = gamma.data[None, :, None, None]
    report_cost("bn", 2 * x.size)
    if training:
        if n < 2:
            raise ContractError(f"batch_norm: degenerate batch (B*H*W = {n} < 2) in train mode")
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = xc * inv_std[None, :, None, None]
        if running is not None:
            rd = running.mean.dtype
            running.mean[...] = ((1 - momentum) * running.mean + momentum * mu).astype(rd)
            running.var[...] = ((1 - momentum) * running.var + momentum * var * (n / (n - 1))).astype(rd)
    else:
        if running is None:
            raise ContractError("batch_norm: eval mode needs running statistics")
        inv_std = (1.0 / np.sqrt(running.var.astype(x.dtype) + eps)).astype(x.dtype)
        xhat = (x.data - running.mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gs + beta.data[None, :, None, None]

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gs
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (dxhat - s1 / n - xhat * (s2 / n)) * inv_std[None, :, None, None]
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return emit("batch_norm", out, (x, gamma, beta), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    report_cost("linear", x.shape[0] * w.shape[0] * w.shape[1])

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return emit("linear", out, inputs, backward)


# ----------------------------------------------------------------------------
# normalizations and losses


def softmax_over_features(s: Tensor, axis: int = 0) -> Tensor:
    """Softmax along ``axis`` (the feature axis N of an N x C score matrix)."""
    if not np.all(np.isfinite(s.data)):
        raise NumericError("softmax_over_features: non-finite scores")
    shifted = s.data - s.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return emit("softmax", p, (s,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    B, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"cross_entropy: labels must lie in [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / B),)

    return emit("cross_entropy", loss, (logits,), backward)
