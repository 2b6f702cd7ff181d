"""SGD training loop, learning-rate schedules, evaluation, checkpoints."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .architectures import Network
from .data import Dataset, iterate_batches
from .errors import ContractError, FormatError, NumericError
from .tensor import Tape, Tensor, no_grad

METRICS_HEADER = ["epoch", "lr", "train_loss", "train_acc", "eval_acc", "wall_seconds"]
SCHEDULES = ("cifar", "imagenet-style")


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr: float = 0.1

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], **kw)


def sgd_update(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """In place: g' = g + wd*theta (decay-flagged weights only); v = m*v + g'; theta -= lr*v."""
    if not state.lr > 0:
        raise ContractError(f"learning rate must be positive, got {state.lr}")
    if not len(params) == len(grads) == len(state.velocity):
        raise ContractError("params, grads and velocity buffers differ in count")
    for p, g, v in zip(params, grads, state.velocity):
        if g.shape != p.shape or v.shape != p.shape:
            raise ContractError(f"{p.name}: gradient {g.shape} / velocity {v.shape} vs parameter {p.shape}")
        if p.decay and state.weight_decay:
            g = g + p.dtype.type(state.weight_decay) * p.data
        v *= p.dtype.type(state.momentum)
        v += g
        p.data -= p.dtype.type(state.lr) * v


def scaled_base_lr(batch: int) -> float:
    """Linear scaling rule 0.1 * batch / 256."""
    return 0.1 * batch / 256


def lr_at(epoch: int, total_epochs: int, base_lr: float, schedule: str = "cifar") -> float:
    """Piecewise-constant schedule.

    ``cifar``: divide by 10 from 50% and again from 75% of training.
    ``imagenet-style``: divide by 10 at epochs 30, 60 and 80.
    """
    if not 0 <= epoch < total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs})")
    if schedule == "cifar":
        drops = (2 * epoch >= total_epochs) + (4 * epoch >= 3 * total_epochs)
    elif schedule == "imagenet-style":
        drops = sum(epoch >= m for m in (30, 60, 80))
    else:
        raise ContractError(f"unknown schedule {schedule!r}")
    return base_lr / 10 ** drops


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 300
    batch: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    schedule: str = "cifar"
    augment: bool = True
    threads: int = 1


def _thread_limit(threads: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=threads)


def evaluate(network: Network, dataset: Dataset, batch: int = 256) -> float:
    """Top-1 accuracy with eval-mode batch norm and no augmentation."""
    was = network.training
    network.eval()
    correct = 0
    try:
        with no_grad():
            for x, y in iterate_batches(dataset, batch):
                logits = network(Tensor(x))
                correct += int((logits.data.argmax(axis=1) == y).sum())
    finally:
        network.training = was
    return correct / len(dataset)


class Trainer:
    def __init__(self, network: Network, config: TrainConfig, dataset: Dataset,
                 eval_dataset: Dataset | None = None, out_dir: str | Path | None = None):
        if len(dataset) == 0:
            raise ContractError("empty training set")
        self.network = network
        self.config = config
        self.dataset = dataset
        self.eval_dataset = eval_dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.params = network.parameters()
        self.state = OptimizerState.for_params(self.params, momentum=config.momentum,
                                               weight_decay=config.weight_decay, lr=config.base_lr)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.step_losses: list[float] = []
        self.history: list[dict] = []

    def train_step(self, x: np.ndarray, y: np.ndarray, batch_index: int = 0) -> tuple[float, int]:
        net = self.network
        net.train()
        for p in self.params:
            p.grad = None
        with Tape() as tape:
            logits = net(Tensor(x))
            loss = ops.cross_entropy(logits, y)
        value = float(loss.item())
        if not np.isfinite(value):
            self._dump(x, y, batch_index)
            raise NumericError(f"non-finite loss {value} at epoch {self.epoch}, batch {batch_index}")
        tape.backward(loss, params=self.params)
        sgd_update(self.params, [p.grad for p in self.params], self.state)
        self.step_losses.append(value)
        return value, int((logits.data.argmax(axis=1) == y).sum())

    def _dump(self, x, y, batch_index):
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            np.savez(self.out_dir / f"nonfinite_batch_e{self.epoch}_b{batch_index}.npz", x=x, y=y)

    def run_epoch(self) -> dict:
        cfg = self.config
        self.state.lr = lr_at(self.epoch, cfg.epochs, cfg.base_lr, cfg.schedule)
        t0 = time.perf_counter()
        total_loss = 0.0
        correct = seen = 0
        with _thread_limit(cfg.threads):
            for i, (x, y) in enumerate(iterate_batches(self.dataset, cfg.batch, self.rng, cfg.augment)):
                loss, hits = self.train_step(x, y, i)
                total_loss += loss * len(y)
                correct += hits
                seen += len(y)
            eval_acc = evaluate(self.network, self.eval_dataset) if self.eval_dataset is not None else float("nan")
        row = {"epoch": self.epoch, "lr": self.state.lr, "train_loss": total_loss / seen,
               "train_acc": correct / seen, "eval_acc": eval_acc,
               "wall_seconds": time.perf_counter() - t0}
        self.history.append(row)
        self.epoch += 1
        return row

    def fit(self, epochs: int | None = None) -> list[dict]:
        end = self.config.epochs if epochs is None else min(self.config.epochs, self.epoch + epochs)
        rows = []
        while self.epoch < end:
            rows.append(self.run_epoch())
            if self.out_dir is not None:
                write_metrics(self.out_dir / "metrics.csv", self.history)
        return rows

    # -- persistence
    def save(self, path, config_echo: dict | None = None) -> None:
        save_checkpoint(path, self.network, self.state, config_echo or {}, self.epoch,
                        self.rng.bit_generator.state)

    def restore(self, path) -> "Checkpoint":
        ckpt = load_checkpoint(path)
        ckpt.apply(self.network, self.state)
        self.epoch = ckpt.epoch
        if ckpt.rng_state:
            self.rng.bit_generator.state = ckpt.rng_state
        return ckpt


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRICS_HEADER, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def write_metrics(path, rows: list[dict]) -> None:
    Path(path).write_text(metrics_csv(rows))


def train(network: Network, dataset: Dataset, epochs: int, batch: int = 64, seed: int = 0,
          eval_dataset: Dataset | None = None, out_dir=None, **kw) -> list[dict]:
    cfg = TrainConfig(epochs=epochs, batch=batch, seed=seed, **kw)
    return Trainer(network, cfg, dataset, eval_dataset, out_dir).fit()


# ----------------------------------------------------------------------------
# checkpoints
#
# "AFIN" | u32 version | u32 count | count x (u16 name len, name, u8 rank,
# u32 extents..., f32 LE payload) | u32 meta len | meta JSON
# The trailing JSON carries the config echo, epoch and RNG state.

MAGIC = b"AFIN"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict | None = None
    version: int = VERSION

    def apply(self, network: Network, state: OptimizerState | None = None) -> None:
        network.load_state_dict({k: v for k, v in self.tensors.items() if not k.startswith("velocity/")})
        if state is not None:
            names = [n for n, _ in network.named_parameters()]
            for name, buf in zip(names, state.velocity):
                key = f"velocity/{name}"
                if key in self.tensors:
                    buf[...] = self.tensors[key]


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("checkpoint truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {VERSION})")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    (m,) = struct.unpack("<I", take(4))
    meta = json.loads(take(m).decode("utf-8"))
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    return Checkpoint(tensors, meta.get("config", {}), meta.get("epoch", 0), meta.get("rng_state"), version)


def save_checkpoint(path, network: Network, state: OptimizerState | None = None,
                    config_echo: dict | None = None, epoch: int = 0, rng_state: dict | None = None) -> None:
    tensors = dict(network.state_dict())
    if state is not None:
        for (name, _), v in zip(network.named_parameters(), state.velocity):
            tensors[f"velocity/{name}"] = v
    meta = {"config": config_echo or {}, "epoch": epoch, "rng_state": rng_state}
    Path(path).write_bytes(encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: sorted(v) if isinstance(v, (set, frozenset)) else v for k, v in d.items()}
