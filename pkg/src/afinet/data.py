"""CIFAR binary ingestion, augmentation, and a synthetic pattern dataset.

CIFAR-10 records are 3073 bytes (label, 3072 channel-major pixels);
CIFAR-100 records are 3074 bytes (coarse label, fine label, pixels).
"""

from __future__ import annotations

import hashlib
import io
import os
import queue
import threading
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator

import numpy as np

from .errors import ContractError, DataError, FormatError

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32
VARIANTS = {"cifar10": (1, 10), "cifar100": (2, 100)}  # header bytes, classes


def record_size(variant: str) -> int:
    if variant not in VARIANTS:
        raise DataError(f"unknown CIFAR variant {variant!r}")
    return VARIANTS[variant][0] + PIXELS


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    source: str = "train"

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "source": self.source}


@dataclass
class Dataset:
    images: np.ndarray          # (M, 3, 32, 32) float32, normalized
    labels: np.ndarray          # (M,) int64
    num_classes: int
    split: str = "train"
    stats: NormStats | None = None
    coarse_labels: np.ndarray | None = None
    variant: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.images)):
            raise DataError("non-finite pixel values")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split, self.stats,
                       None if self.coarse_labels is None else self.coarse_labels[idx], self.variant)


def compute_stats(images01: np.ndarray, source: str = "train") -> NormStats:
    x = images01.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = np.maximum(x.std(axis=(0, 2, 3)), 1e-6)
    return NormStats(mean.astype(np.float32), std.astype(np.float32), source)


def normalize(images01: np.ndarray, stats: NormStats) -> np.ndarray:
    return ((images01 - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]).astype(np.float32)


# ----------------------------------------------------------------------------
# CIFAR binary format


def _open(source) -> tuple[BinaryIO, bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "rb"), True
    return source, False


def _stream_size(f: BinaryIO) -> int:
    pos = f.tell()
    f.seek(0, io.SEEK_END)
    end = f.tell()
    f.seek(pos)
    return end - pos


def iter_cifar_records(source, variant: str, batch_size: int = 1000
                       ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray | None]]:
    """Yield ``(pixels uint8 (b,3,32,32), labels, coarse_labels)`` lazily,
    reading exactly one batch of records per step."""
    rec = record_size(variant)
    header, classes = VARIANTS[variant]
    f, owned = _open(source)
    try:
        size = _stream_size(f)
        if size % rec:
            raise FormatError(f"{size} bytes is not a multiple of the {rec}-byte {variant} record")
        remaining = size // rec
        while remaining:
            n = min(batch_size, remaining)
            buf = f.read(n * rec)
            if len(buf) != n * rec:
                raise FormatError("unexpected end of file")
            arr = np.frombuffer(buf, dtype=np.uint8).reshape(n, rec)
            labels = arr[:, header - 1].astype(np.int64)
            if labels.max() >= classes:
                raise DataError(f"label byte {labels.max()} >= {classes} classes")
            coarse = None
            if variant == "cifar100":
                coarse = arr[:, 0].astype(np.int64)
                if coarse.max() >= 20:
                    raise DataError(f"coarse label byte {coarse.max()} >= 20")
            yield arr[:, header:].reshape(n, *IMAGE_SHAPE), labels, coarse
            remaining -= n
    finally:
        if owned:
            f.close()


def load_cifar(source, variant: str, split: str = "train", stats: NormStats | None = None,
               batch_size: int = 1000) -> Dataset:
    """Load a CIFAR binary file.

    Normalization statistics are computed from the data only for the
    training split; any other split must be given the training stats.
    """
    pix, labs, coarse = [], [], []
    for p, l, c in iter_cifar_records(source, variant, batch_size):
        pix.append(p)
        labs.append(l)
        if c is not None:
            coarse.append(c)
    if not pix:
        raise DataError("CIFAR file holds no records")
    raw = np.concatenate(pix)
    images01 = raw.astype(np.float32) / 255.0
    if stats is None:
        if split != "train":
            raise ContractError("evaluation splits must reuse the training-split statistics")
        stats = compute_stats(images01)
    elif stats.source != "train":
        raise ContractError("normalization stats must come from the training split")
    return Dataset(normalize(images01, stats), np.concatenate(labs), VARIANTS[variant][1], split, stats,
                   np.concatenate(coarse) if coarse else None, variant)


def encode_cifar(pixels: np.ndarray, labels, variant: str, coarse_labels=None) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    cols = [labels, pixels]
    if variant == "cifar100":
        coarse = np.zeros_like(labels) if coarse_labels is None else np.asarray(coarse_labels, np.uint8).reshape(-1, 1)
        cols = [coarse, labels, pixels]
    elif variant != "cifar10":
        raise DataError(f"unknown CIFAR variant {variant!r}")
    return np.concatenate(cols, axis=1).tobytes()


def to_pixels(dataset: Dataset) -> np.ndarray:
    """Invert normalization back to uint8 pixels."""
    s = dataset.stats
    x = dataset.images.astype(np.float64) * s.std[None, :, None, None] + s.mean[None, :, None, None]
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def dump_cifar(dataset: Dataset) -> bytes:
    return encode_cifar(to_pixels(dataset), dataset.labels, dataset.variant, dataset.coarse_labels)


# ----------------------------------------------------------------------------
# augmentation


def shift_flip(image: np.ndarray, dy: int, dx: int, flip: bool, pad: int = 4) -> np.ndarray:
    """Crop a window at offset (dy, dx) of the zero-padded image; (pad, pad) is no shift."""
    C, H, W = image.shape
    padded = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=image.dtype)
    padded[:, pad:pad + H, pad:pad + W] = image
    out = padded[:, dy:dy + H, dx:dx + W]
    return np.ascontiguousarray(out[:, :, ::-1] if flip else out)


def augment(image: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    flip = bool(rng.random() < 0.5)
    return shift_flip(image, dy, dx, flip, pad)


def augment_batch(images: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    return np.stack([augment(im, rng, pad) for im in images])


def iterate_batches(dataset: Dataset, batch: int, rng=None, augment_images: bool = False
                    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled (if ``rng`` given) mini-batches; the last batch may be short."""
    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    for start in range(0, len(order), batch):
        idx = order[start:start + batch]
        x = dataset.images[idx]
        if augment_images:
            x = augment_batch(x, rng)
        yield x, dataset.labels[idx]


def prefetch(batches, depth: int = 2):
    """Produce ``batches`` on a helper thread through a bounded queue; order is preserved."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def producer():
        try:
            for item in batches:
                q.put(item)
        except BaseException as exc:  # re-raised on the consumer side
            q.put(exc)
        q.put(done)

    t = threading.Thread(target=producer, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    t.join()


# ----------------------------------------------------------------------------
# synthetic data


def synthetic_dataset(n: int = 256, k_classes: int = 4, seed: int = 0, noise: float = 0.5) -> Dataset:
    """Class-conditioned gratings plus a class-placed blob, under noise.

    Class c gets a grating with its own orientation and frequency (random
    phase per image, so no single linear template matches), a colour
    tint, and a soft blob in a class-specific location.  Labels are
    assigned round-robin.
    """
    if n < k_classes or k_classes < 2:
        raise ContractError("need n >= k_classes >= 2")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    labels = np.arange(n) % k_classes
    images = np.empty((n, *IMAGE_SHAPE), dtype=np.float64)
    for i, c in enumerate(labels):
        theta = np.pi * c / k_classes
        freq = 2.0 + (c % 3)
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / 32 + phase)
        angle = 2 * np.pi * c / k_classes
        cy, cx = 16 + 9 * np.sin(angle), 16 + 9 * np.cos(angle)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 18.0)
        tint = 0.5 + 0.5 * np.cos(angle + np.array([0.0, 2.1, 4.2]))
        img = 0.5 * grating[None] + 1.5 * blob[None] * tint[:, None, None]
        images[i] = img + noise * rng.standard_normal(IMAGE_SHAPE)
    images01 = ((images - images.min()) / (images.max() - images.min())).astype(np.float32)
    stats = compute_stats(images01)
    return Dataset(normalize(images01, stats), labels.astype(np.int64), k_classes, "train", stats,
                   variant="synthetic", meta={"n": n, "k_classes": k_classes, "seed": seed})


def checksum(dataset: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.images).tobytes())
    h.update(np.ascontiguousarray(dataset.labels).tobytes())
    return h.hexdigest()
