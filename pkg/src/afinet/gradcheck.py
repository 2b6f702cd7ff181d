"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor, no_grad


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                      samples: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` recomputes a scalar loss from the current contents of ``params``
    (which it closes over).  Parameters must be float64.  With ``samples``
    set, that many coordinates are drawn at random across all parameters
    instead of checking every one.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ContractError(f"step h={h} outside [1e-4, 1e-2]")
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"finite differences need float64 parameters, got {p.dtype}")

    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss, params=params)
    analytic = [p.grad.copy() for p in params]

    with no_grad():
        f0 = float(fn().item())
        if float(fn().item()) != f0 or float(loss.item()) != f0:
            raise ContractError("fn is not deterministic; fix batch statistics and randomness")

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if samples is not None and samples < len(coords):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[k] for k in sorted(picks)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = float(fn().item())
            flat[j] = orig - h
            fm = float(fn().item())
            flat[j] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------------
# the standing suite: every primitive plus an end-to-end network


def _away_from_zero(rng, shape, low=0.1):
    """Values bounded away from ReLU kinks."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _case(name: str, rng: np.random.Generator):
    """Return ``(fn, params)`` for one random instance of primitive ``name``."""
    from . import afi, ops

    def t(shape, fn=None):
        data = fn(rng, shape) if fn is not None else rng.standard_normal(shape)
        return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)

    def weighted(out_fn, params):
        probe = {}

        def fn():
            out = out_fn()
            if "w" not in probe:
                probe["w"] = Tensor(rng.standard_normal(out.shape))
            return ops.sum(ops.mul(out, probe["w"]))
        return fn, params

    if name == "add":
        a, b = t((3, 4)), t((1, 4))
        return weighted(lambda: ops.add(a, b), [a, b])
    if name == "mul":
        a, b = t((2, 3, 4)), t((3, 1))
        return weighted(lambda: ops.mul(a, b), [a, b])
    if name == "scale":
        a = t((5, 3))
        return weighted(lambda: ops.scale(a, 0.7), [a])
    if name == "relu":
        a = t((4, 6), _away_from_zero)
        return weighted(lambda: ops.relu(a), [a])
    if name == "sum":
        a = t((3, 4, 5))
        return weighted(lambda: ops.sum(a, axis=1), [a])
    if name == "mean":
        a = t((3, 4, 5))
        return weighted(lambda: ops.mean(a, axis=(0, 2)), [a])
    if name == "reshape":
        a = t((2, 6))
        return weighted(lambda: ops.reshape(a, (3, 4)), [a])
    if name == "select":
        a = t((4, 5))
        return weighted(lambda: ops.select(a, (slice(1, 3), 2)), [a])
    if name == "concat":
        a, b = t((2, 3, 4, 4)), t((2, 2, 4, 4))
        return weighted(lambda: ops.concat([a, b], axis=1), [a, b])
    if name == "stack":
        a, b, c = t((2, 3)), t((2, 3)), t((2, 3))
        return weighted(lambda: ops.stack([a, b, c]), [a, b, c])
    if name == "global_avg_pool":
        a = t((2, 3, 5, 5))
        return weighted(lambda: ops.global_avg_pool(a), [a])
    if name == "conv2d":
        groups = int(rng.choice([1, 2]))
        stride = int(rng.choice([1, 2]))
        k = int(rng.choice([1, 3]))
        x, w = t((2, 4, 6, 6)), t((4, 4 // groups, k, k))
        return weighted(lambda: ops.conv2d(x, w, stride, k // 2, groups), [x, w])
    if name == "batch_norm":
        x, g, b = t((3, 4, 3, 3)), t((4,)), t((4,))
        return weighted(lambda: ops.batch_norm(x, g, b, None, training=True), [x, g, b])
    if name == "linear":
        x, w, b = t((3, 5)), t((4, 5)), t((4,))
        return weighted(lambda: ops.linear(x, w, b), [x, w, b])
    if name == "softmax":
        s = t((4, 6))
        return weighted(lambda: ops.softmax_over_features(s, axis=0), [s])
    if name == "cross_entropy":
        logits = t((5, 4))
        labels = rng.integers(0, 4, size=5)
        return (lambda: ops.cross_entropy(logits, labels)), [logits]
    if name == "afi":
        n = int(rng.integers(1, 5))
        stack = [t((2, 8, 3, 3)) for _ in range(n)]
        p = afi.AfiParams.init(8, r=4, rng=rng)
        return weighted(lambda: afi.afi_forward(stack, p)[0], stack + [p.w1, p.w2])
    raise ContractError(f"no gradient case for {name!r}")


PRIMITIVES = ("add", "mul", "scale", "relu", "sum", "mean", "reshape", "select", "concat", "stack",
              "global_avg_pool", "conv2d", "batch_norm", "linear", "softmax", "cross_entropy", "afi")


def primitive_errors(name: str, seeds: int = 20, h: float = 1e-4) -> list[float]:
    """Max relative error of primitive ``name`` over ``seeds`` random instances (float64)."""
    from .tensor import precision

    out = []
    with precision(np.float64):
        for seed in range(seeds):
            fn, params = _case(name, np.random.default_rng(seed))
            out.append(finite_diff_check(fn, params, h=h))
    return out


def network_error(depth: int = 8, samples: int = 50, seed: int = 0, h: float = 1e-4) -> float:
    """Finite-difference check of a whole AFI-ResNet on a tiny batch, float64, train-mode BN."""
    from . import ops
    from .architectures import NetworkConfig, build_network
    from .tensor import precision

    with precision(np.float64):
        net = build_network(NetworkConfig.from_depth(depth, num_classes=4, seed=seed)).astype(np.float64)
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((4, 3, 8, 8)))
        y = rng.integers(0, 4, size=4)
        net.train()
        return finite_diff_check(lambda: ops.cross_entropy(net(x), y), net.parameters(), h=h,
                                 samples=samples, seed=seed)
