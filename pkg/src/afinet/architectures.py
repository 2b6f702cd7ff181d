"""ResNet / AFI-ResNet / AFI-MobileNetV2 building blocks and the CIFAR
(6N+2) network family.

A network is first described symbolically by :func:`plan` (a list of
:class:`BlockSpec` per stage).  The same plan drives both the runtime
builder here and the static cost analyzer in :mod:`afinet.analysis`.

Two presets decide how AFI is wired into a stage:

``table-2``
    The first block of every AFI stage is a full-width standard block.
    Blocks 2..N use the shrinking first conv and each owns an AFI module
    whose input set is the stage's half-width features so far, the
    block's own feature included.
``paper-text``
    Every block of an AFI stage uses the shrinking conv.  Block i mixes
    its strict predecessors; block 1 has none and reuses its own feature,
    block 2 has exactly one and passes it through without scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import ops
from .afi import AfiParams, afi_forward
from .errors import ConfigError, DimensionError
from .ops import RunningStats
from .tensor import Tensor, cost_scope

PRESETS = ("table-2", "paper-text")
BLOCK_KINDS = ("standard", "afi-basic", "afi-mbv2")


# ----------------------------------------------------------------------------
# symbolic description


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    channels: int
    stride: int = 1
    has_afi: bool = False
    # features entering the scoring map when the block runs
    afi_input_arity: int = 0
    # arity charged by the closed-form scoring accounting
    ledger_arity: int = 0
    # where the concatenated feature R comes from: none | self | previous | inclusive
    mix: str = "none"
    expansion: int = 6

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.has_afi and self.kind == "standard":
            raise ConfigError("a standard block cannot carry an AFI module")

    @property
    def half(self) -> int:
        """Width of the block's half-width feature X."""
        if self.kind == "afi-mbv2":
            return (self.in_channels * self.expansion) // 2
        return self.channels // 2

    @property
    def projection(self) -> bool:
        if self.kind == "afi-mbv2":
            return False
        return self.stride != 1 or self.in_channels != self.channels

    @property
    def residual(self) -> bool:
        if self.kind == "afi-mbv2":
            return self.stride == 1 and self.in_channels == self.channels
        return True


@dataclass(frozen=True)
class NetworkConfig:
    blocks_per_stage: int
    stage_channels: tuple[int, ...] = (16, 32, 64)
    num_classes: int = 10
    r: int = 4
    preset: str = "table-2"
    afi_stages: frozenset = field(default_factory=lambda: frozenset({1, 2, 3}))
    seed: int = 0
    in_channels: int = 3
    image_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "afi_stages", frozenset(int(s) for s in self.afi_stages))
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        valid = set(range(1, len(self.stage_channels) + 1))
        if not self.afi_stages <= valid:
            raise ConfigError(f"afi_stages {sorted(self.afi_stages)} not a subset of {sorted(valid)}")
        if self.r < 1 or self.num_classes < 1:
            raise ConfigError("r and num_classes must be positive")

    @property
    def depth(self) -> int:
        return 6 * self.blocks_per_stage + 2

    @classmethod
    def from_depth(cls, depth: int, **kw) -> "NetworkConfig":
        if depth < 8 or (depth - 2) % 6:
            raise ConfigError(f"depth must be 6N+2 with N >= 1, got {depth}")
        return cls(blocks_per_stage=(depth - 2) // 6, **kw)

    def with_(self, **kw) -> "NetworkConfig":
        return replace(self, **kw)


def plan(config: NetworkConfig) -> list[list[BlockSpec]]:
    stages = []
    cin = config.stage_channels[0]
    n = config.blocks_per_stage
    for s, C in enumerate(config.stage_channels, start=1):
        stride = 1 if s == 1 else 2
        blocks = []
        for b in range(1, n + 1):
            bin_, bstride = (cin, stride) if b == 1 else (C, 1)
            if s not in config.afi_stages:
                spec = BlockSpec("standard", bin_, C, bstride)
            elif config.preset == "table-2":
                if b == 1:
                    spec = BlockSpec("standard", bin_, C, bstride)
                else:
                    spec = BlockSpec("afi-basic", bin_, C, bstride, has_afi=True,
                                     afi_input_arity=b - 1, ledger_arity=b, mix="inclusive")
            else:
                if b == 1:
                    spec = BlockSpec("afi-basic", bin_, C, bstride, mix="self")
                else:
                    spec = BlockSpec("afi-basic", bin_, C, bstride, has_afi=b >= 3,
                                     afi_input_arity=b - 1, ledger_arity=b - 1 if b >= 3 else 0,
                                     mix="previous")
            blocks.append(spec)
        stages.append(blocks)
        cin = C
    return stages


# ----------------------------------------------------------------------------
# layers


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv:
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, groups: int = 1,
                 rng: np.random.Generator | None = None, name: str = "conv"):
        if cin % groups or cout % groups:
            raise ConfigError(f"{name}: groups={groups} must divide {cin} and {cout}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (cin // groups) * k * k
        self.weight = Tensor(_he(rng, (cout, cin // groups, k, k), fan_in), requires_grad=True,
                             name=f"{name}.weight", decay=True)
        self.stride, self.pad, self.groups = stride, k // 2, groups

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.pad, self.groups)

    def named_tensors(self):
        yield self.weight.name, self.weight


class BatchNorm:
    def __init__(self, channels: int, name: str = "bn"):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running = RunningStats.fresh(channels)
        self.name = name

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running, training)

    def named_tensors(self):
        yield self.gamma.name, self.gamma
        yield self.beta.name, self.beta


class Linear:
    def __init__(self, cin: int, cout: int, bias: bool = True, rng=None, name: str = "fc"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_he(rng, (cout, cin), cin), requires_grad=True,
                             name=f"{name}.weight", decay=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def named_tensors(self):
        yield self.weight.name, self.weight
        if self.bias is not None:
            yield self.bias.name, self.bias


# ----------------------------------------------------------------------------
# blocks


@dataclass
class BlockParams:
    spec: BlockSpec
    k1: Conv
    bn1: BatchNorm
    k2: Conv
    bn2: BatchNorm
    shortcut: tuple[Conv, BatchNorm] | None = None
    afi: AfiParams | None = None
    # afi-mbv2 only: depthwise stage between expansion and projection
    kdw: Conv | None = None
    bndw: BatchNorm | None = None

    @classmethod
    def build(cls, spec: BlockSpec, r: int = 4, rng=None, name: str = "block") -> "BlockParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        cin, C = spec.in_channels, spec.channels
        if spec.kind == "afi-mbv2":
            half = spec.half
            wide = 2 * half
            if half < 1:
                raise ConfigError(f"{name}: expansion output too narrow to halve")
            k1 = Conv(cin, half, 1, 1, rng=rng, name=f"{name}.k1")
            bn1 = BatchNorm(half, f"{name}.bn1")
            kdw = Conv(wide, wide, 3, spec.stride, groups=wide, rng=rng, name=f"{name}.kdw")
            bndw = BatchNorm(wide, f"{name}.bndw")
            k2 = Conv(wide, C, 1, 1, rng=rng, name=f"{name}.k2")
            bn2 = BatchNorm(C, f"{name}.bn2")
            afi = AfiParams.init(half, r, rng, f"{name}.afi") if spec.has_afi else None
            return cls(spec, k1, bn1, k2, bn2, None, afi, kdw, bndw)
        if spec.kind == "standard":
            k1 = Conv(cin, C, 3, spec.stride, rng=rng, name=f"{name}.k1")
            bn1 = BatchNorm(C, f"{name}.bn1")
            k2 = Conv(C, C, 3, 1, rng=rng, name=f"{name}.k2")
            afi = None
        else:
            half = spec.half
            k1 = Conv(cin, half, 3, spec.stride, rng=rng, name=f"{name}.k1")
            bn1 = BatchNorm(half, f"{name}.bn1")
            k2 = Conv(2 * half, C, 3, 1, rng=rng, name=f"{name}.k2")
            afi = AfiParams.init(half, r, rng, f"{name}.afi") if spec.has_afi else None
        bn2 = BatchNorm(C, f"{name}.bn2")
        shortcut = None
        if spec.projection:
            shortcut = (Conv(cin, C, 1, spec.stride, rng=rng, name=f"{name}.proj"),
                        BatchNorm(C, f"{name}.proj_bn"))
        return cls(spec, k1, bn1, k2, bn2, shortcut, afi)

    def layers(self):
        yield from (self.k1, self.bn1)
        if self.kdw is not None:
            yield from (self.kdw, self.bndw)
        yield from (self.k2, self.bn2)
        if self.shortcut is not None:
            yield from self.shortcut

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for layer in self.layers():
            yield from layer.named_tensors()
        if self.afi is not None:
            yield self.afi.w1.name, self.afi.w1
            yield self.afi.w2.name, self.afi.w2

    def batch_norms(self) -> Iterator[BatchNorm]:
        return (layer for layer in self.layers() if isinstance(layer, BatchNorm))


def _shortcut(x: Tensor, params: BlockParams, training: bool) -> Tensor:
    if params.shortcut is None:
        return x
    conv, bn = params.shortcut
    return bn(conv(x), training)


def _mix(X: Tensor, stack: Sequence[Tensor], params: BlockParams) -> Tensor:
    spec = params.spec
    if spec.mix == "self":
        return X
    if spec.mix == "previous":
        feats = list(stack)
    elif spec.mix == "inclusive":
        feats = list(stack) + [X]
    else:
        raise ConfigError(f"block kind {spec.kind} needs a mix policy")
    for f in feats:
        if f.shape != X.shape:
            raise ConfigError(f"feature stack entry {f.shape} does not match block feature {X.shape}")
    if params.afi is None:
        if len(feats) != 1:
            raise ConfigError(f"block without AFI received {len(feats)} features to mix")
        return feats[0]
    r, _ = afi_forward(feats, params.afi)
    return r


def resnet_block_forward(x: Tensor, params: BlockParams, training: bool = True,
                         taps: dict | None = None, tag: str = "") -> Tensor:
    """relu(shortcut(x) + bn2(conv(relu(bn1(conv(x, k1))), k2)))"""
    if x.ndim != 4 or x.shape[1] != params.spec.in_channels:
        raise ConfigError(f"block expects {params.spec.in_channels} input channels, got shape {x.shape}")
    h = ops.relu(params.bn1(params.k1(x), training))
    if taps is not None:
        taps[f"{tag}.mid"] = h
    out = ops.relu(ops.add(_shortcut(x, params, training), params.bn2(params.k2(h), training)))
    if taps is not None:
        taps[f"{tag}.out"] = out
    return out


def afi_resnet_block_forward(x: Tensor, params: BlockParams, stack: Sequence[Tensor],
                             training: bool = True, taps: dict | None = None,
                             tag: str = "") -> tuple[Tensor, Tensor]:
    """Returns the block output and the half-width feature X to append to
    the stage's running stack."""
    if x.ndim != 4 or x.shape[1] != params.spec.in_channels:
        raise ConfigError(f"block expects {params.spec.in_channels} input channels, got shape {x.shape}")
    X = ops.relu(params.bn1(params.k1(x), training))
    R = _mix(X, stack, params)
    if taps is not None:
        taps[f"{tag}.mid"] = X
        taps[f"{tag}.afi"] = R
    out = ops.relu(ops.add(_shortcut(x, params, training),
                           params.bn2(params.k2(ops.concat_channels(X, R)), training)))
    if taps is not None:
        taps[f"{tag}.out"] = out
    return out, X


def afi_mobilenetv2_block_forward(x: Tensor, params: BlockParams, stack: Sequence[Tensor],
                                  training: bool = True, taps: dict | None = None,
                                  tag: str = "") -> tuple[Tensor, Tensor]:
    """1x1 expand (half width) -> concat AFI output -> 3x3 depthwise -> 1x1 project."""
    spec = params.spec
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ConfigError(f"block expects {spec.in_channels} input channels, got shape {x.shape}")
    X = ops.relu(params.bn1(params.k1(x), training))
    R = _mix(X, stack, params)
    if taps is not None:
        taps[f"{tag}.mid"] = X
        taps[f"{tag}.afi"] = R
    h = ops.relu(params.bndw(params.kdw(ops.concat_channels(X, R)), training))
    out = params.bn2(params.k2(h), training)
    if spec.residual:
        out = ops.add(x, out)
    if taps is not None:
        taps[f"{tag}.out"] = out
    return out, X


# ----------------------------------------------------------------------------
# network


class Network:
    """Stem conv, AFI/standard stages, global pool + linear head."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.training = True
        rng = np.random.default_rng(config.seed)
        c0 = config.stage_channels[0]
        self.stem = Conv(config.in_channels, c0, 3, 1, rng=rng, name="stem.conv")
        self.stem_bn = BatchNorm(c0, "stem.bn")
        self.plan = plan(config)
        self.stages: list[list[BlockParams]] = []
        for s, specs in enumerate(self.plan, start=1):
            self.stages.append([BlockParams.build(spec, config.r, rng, f"stage{s}.block{b}")
                                for b, spec in enumerate(specs, start=1)])
        self.head = Linear(config.stage_channels[-1], config.num_classes, rng=rng, name="head.fc")

    # -- mode switches
    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    # -- forward
    def features(self, x: Tensor, taps: dict | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(f"network expects B x {self.config.in_channels} x H x W, got {x.shape}")
        with cost_scope("stem"):
            h = ops.relu(self.stem_bn(self.stem(x), self.training))
        if taps is not None:
            taps["stem"] = h
        for s, blocks in enumerate(self.stages, start=1):
            stack: list[Tensor] = []
            with cost_scope(f"stage{s}"):
                for b, params in enumerate(blocks, start=1):
                    tag = f"stage{s}.block{b}"
                    if params.spec.kind == "standard":
                        h = resnet_block_forward(h, params, self.training, taps, tag)
                    else:
                        h, X = afi_resnet_block_forward(h, params, stack, self.training, taps, tag)
                        stack.append(X)
        return h

    def forward(self, x: Tensor, taps: dict | None = None) -> Tensor:
        h = self.features(x, taps)
        with cost_scope("head"):
            return self.head(ops.global_avg_pool(h))

    __call__ = forward

    def predict_proba(self, x: Tensor) -> np.ndarray:
        logits = self.forward(x).data.astype(np.float64)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    # -- parameters and state
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.stem.named_tensors()) + list(self.stem_bn.named_tensors())
        for blocks in self.stages:
            for params in blocks:
                out.extend(params.named_tensors())
        out.extend(self.head.named_tensors())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def batch_norms(self) -> list[BatchNorm]:
        bns = [self.stem_bn]
        for blocks in self.stages:
            for params in blocks:
                bns.extend(params.batch_norms())
        return bns

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{n}": t.data for n, t in self.named_parameters()}
        for bn in self.batch_norms():
            state[f"buffer/{bn.name}.running_mean"] = bn.running.mean
            state[f"buffer/{bn.name}.running_var"] = bn.running.var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise ConfigError(f"state is missing {sorted(missing)[:3]}...")
        for key, arr in own.items():
            src = np.asarray(state[key])
            if src.shape != arr.shape:
                raise DimensionError(f"{key}: stored shape {src.shape} != {arr.shape}")
            arr[...] = src

    def astype(self, dtype) -> "Network":
        """Cast parameters and running statistics in place (e.g. float64 for gradient checks)."""
        for t in self.parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        for bn in self.batch_norms():
            bn.running.mean = bn.running.mean.astype(dtype)
            bn.running.var = bn.running.var.astype(dtype)
        return self


def build_network(config: NetworkConfig) -> Network:
    return Network(config)


def build_resnet(blocks_per_stage: int, num_classes: int = 10, seed: int = 0, **kw) -> Network:
    """Plain ResNet-(6N+2): a network with AFI disabled in every stage."""
    return Network(NetworkConfig(blocks_per_stage, num_classes=num_classes, seed=seed,
                                 afi_stages=frozenset(), **kw))
