"""Dense tensors and the reverse-mode tape.

A :class:`Tensor` is a thin wrapper around a numpy array.  Gradient
tracking only happens inside an active :class:`Tape`; outside one every
op is a plain numpy computation, which doubles as the no-grad mode used
for evaluation.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, NumericError

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


# ----------------------------------------------------------------------------
# precision / debug switches


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors.

    Training runs in float32; gradient checks use ``precision(np.float64)``.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def double_precision():
    return precision(np.float64)


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for non-finite values."""
    _state.debug = bool(flag)


def debug_enabled() -> bool:
    return _get("debug", False)


# ----------------------------------------------------------------------------
# Tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "decay", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None, decay: bool = False):
        arr = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        # only weights flagged here receive weight decay
        self.decay = decay

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t.decay = False
        return t

    # -- array-ish protocol
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.scale(_as_tensor(other, self), -1.0))

    def __rsub__(self, other):
        from . import ops
        return ops.add(_as_tensor(other, self), ops.scale(self, -1.0))

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __getitem__(self, index):
        from . import ops
        return ops.select(self, index)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis=axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis=axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# ----------------------------------------------------------------------------
# Tape


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of executed ops, replayed in reverse by :meth:`backward`.

    Use as a context manager; ops executed inside record themselves when
    any of their inputs requires a gradient.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._produced: set[int] = set()
        self.visits = 0

    def __enter__(self) -> "Tape":
        stack = _get("tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        self.records.append(Record(op, inputs, output, backward))
        self._produced.add(id(output))

    def backward(self, loss: Tensor, params: Iterable[Tensor] = (), seed_grad=None) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor.

        ``params`` lists tensors whose gradient must exist afterwards even
        if they did not take part in the computation (they get zeros).
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced and not loss.requires_grad:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data) if seed_grad is None else np.asarray(seed_grad, loss.dtype)
        }
        keep: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self.records):
            self.visits += 1
            g_out = grads.get(id(rec.output))
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    keep[key] = t
        for key, t in keep.items():
            g = grads[key]
            if g.shape != t.shape:
                g = g.reshape(t.shape)
            t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def active_tape() -> Tape | None:
    stack = _get("tapes", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording even inside an enclosing tape."""
    prev = _get("tapes", None)
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = prev


def emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    if debug_enabled() and not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=track)
    if track:
        tape.record(op, inputs, result, backward)
    return result


def backward(loss: Tensor, tape: Tape | None = None, params: Iterable[Tensor] = ()) -> None:
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("no tape recorded the loss")
    tape.backward(loss, params=params)


# ----------------------------------------------------------------------------
# cost accounting hooks (used by the runtime enumeration oracle)


@dataclass
class CostCounter:
    """Collects conv/linear/bn cost units reported by ops, keyed by scope."""

    flops: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    events: list[tuple[str, str, int]] = field(default_factory=list)

    def add(self, kind: str, units: int) -> None:
        scope = current_scope()
        self.flops[scope] += int(units)
        self.events.append((scope, kind, int(units)))

    @property
    def total(self) -> int:
        return sum(self.flops.values())


@contextlib.contextmanager
def count_costs() -> Iterator[CostCounter]:
    counter = CostCounter()
    prev = _get("counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


def report_cost(kind: str, units: int) -> None:
    counter = _get("counter", None)
    if counter is not None:
        counter.add(kind, units)


@contextlib.contextmanager
def cost_scope(name: str) -> Iterator[None]:
    stack = _get("scopes", None)
    if stack is None:
        stack = _state.scopes = []
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


def current_scope() -> str:
    stack = _get("scopes", None)
    return stack[-1] if stack else "other"
