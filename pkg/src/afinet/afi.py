"""The attentive feature integration (AFI) module.

Given N same-shape features, each is squeezed to a channel descriptor,
scored by a shared two-layer bottleneck map, and the scores are
softmax-normalized across the N features per channel.  The output is the
per-channel convex combination of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

FeatureStack = Sequence[Tensor]


def bottleneck_width(channels: int, r: int) -> int:
    return max(1, channels // r)


@dataclass
class AfiParams:
    """Shared scoring weights of one AFI module (no biases)."""

    w1: Tensor  # (Cb, C)
    w2: Tensor  # (C, Cb)
    r: int

    @classmethod
    def init(cls, channels: int, r: int = 4, rng: np.random.Generator | None = None,
             name: str = "afi") -> "AfiParams":
        if channels < 1 or r < 1:
            raise ConfigError(f"AFI needs channels >= 1 and r >= 1, got C={channels}, r={r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        cb = bottleneck_width(channels, r)
        w1 = rng.standard_normal((cb, channels)) * np.sqrt(2.0 / channels)
        w2 = rng.standard_normal((channels, cb)) * np.sqrt(2.0 / cb)
        return cls(Tensor(w1, requires_grad=True, name=f"{name}.w1", decay=True),
                   Tensor(w2, requires_grad=True, name=f"{name}.w2", decay=True), r)

    @classmethod
    def zeros(cls, channels: int, r: int = 4) -> "AfiParams":
        cb = bottleneck_width(channels, r)
        return cls(Tensor(np.zeros((cb, channels)), requires_grad=True, decay=True),
                   Tensor(np.zeros((channels, cb)), requires_grad=True, decay=True), r)

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def bottleneck(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.w2]

    def num_params(self) -> int:
        return self.w1.size + self.w2.size


@dataclass
class AttentionState:
    """Per-sample intermediates, each shaped (N, B, C)."""

    z: Tensor
    scores: Tensor
    weights: Tensor


def squeeze(x: Tensor) -> Tensor:
    return ops.global_avg_pool(x)


def score(z: Tensor, params: AfiParams) -> Tensor:
    """``w2 @ relu(w1 @ z)`` applied row-wise to a (rows, C) batch."""
    if z.ndim != 2 or z.shape[1] != params.channels:
        raise ConfigError(f"score: descriptor width {z.shape[-1]} != module channels {params.channels}")
    return ops.linear(ops.relu(ops.linear(z, params.w1)), params.w2)


def afi_forward(stack: FeatureStack, params: AfiParams) -> tuple[Tensor, AttentionState]:
    """Integrate ``stack`` into one feature map of the same shape."""
    stack = list(stack)
    if not stack:
        raise ContractError("AFI needs at least one input feature")
    shape = stack[0].shape
    for x in stack[1:]:
        if x.shape != shape:
            raise DimensionError(f"AFI inputs must share a shape: {shape} vs {x.shape}")
    B, C = shape[0], shape[1]
    if C != params.channels:
        raise ConfigError(f"AFI module built for {params.channels} channels, features have {C}")
    n = len(stack)

    z = ops.stack([squeeze(x) for x in stack])                      # (N, B, C)
    s = ops.reshape(score(ops.reshape(z, (n * B, C)), params), (n, B, C))
    w = ops.softmax_over_features(s, axis=0)
    mix = ops.mul(ops.reshape(w, (n, B, C, 1, 1)), ops.stack(stack))
    r = ops.sum(mix, axis=0)
    return r, AttentionState(z, s, w)

