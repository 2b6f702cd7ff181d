"""Class selectivity index and Grad-CAM heatmaps.

Activations are addressed by layer tags emitted during the forward pass:
``stem`` and ``stage{s}.block{b}.{mid,afi,out}``.  ``mid`` is the
post-ReLU output of the block's first conv (the position AFI mixes in an
AFI block), ``afi`` the AFI output, ``out`` the block output.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .architectures import Network
from .data import Dataset, iterate_batches
from .errors import ConfigError, ContractError
from .tensor import Tape, Tensor, no_grad

CSI_EPS = 1e-12


@dataclass
class ActivationStats:
    """Running per-class sums of per-filter mean activity."""

    sums: np.ndarray      # (F, K) float64
    counts: np.ndarray    # (K,) int64

    @classmethod
    def empty(cls, filters: int, classes: int) -> "ActivationStats":
        return cls(np.zeros((filters, classes)), np.zeros(classes, dtype=np.int64))

    def update(self, activations: np.ndarray, labels: np.ndarray) -> None:
        a = np.asarray(activations, dtype=np.float64)
        if a.ndim == 4:
            a = a.mean(axis=(2, 3))
        np.add.at(self.sums.T, np.asarray(labels), a)
        np.add.at(self.counts, np.asarray(labels), 1)

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        return ActivationStats(self.sums + other.sums, self.counts + other.counts)

    @property
    def mu(self) -> np.ndarray:
        if np.any(self.counts < 1):
            raise ContractError("every class needs at least one sample")
        return self.sums / self.counts[None, :]


def class_selectivity_index(stats: ActivationStats | np.ndarray) -> np.ndarray:
    """(mu_max - mean of the other classes) / (mu_max + that mean + eps), per filter."""
    mu = stats.mu if isinstance(stats, ActivationStats) else np.asarray(stats, dtype=np.float64)
    if mu.ndim != 2 or mu.shape[1] < 2:
        raise ContractError("need a filters x classes matrix with at least two classes")
    if np.any(mu < 0):
        raise ContractError("negative class-conditional activity; collect after a ReLU")
    k = mu.shape[1]
    top = mu.max(axis=1)
    rest = (mu.sum(axis=1) - top) / (k - 1)
    rest = np.maximum(rest, 0.0)
    return (top - rest) / (top + rest + CSI_EPS)


def collect_activation_stats(network: Network, dataset: Dataset, layer_tag: str,
                             batch: int = 128) -> ActivationStats:
    was = network.training
    network.eval()
    stats = None
    try:
        with no_grad():
            for x, y in iterate_batches(dataset, batch):
                taps: dict = {}
                network(Tensor(x), taps)
                if layer_tag not in taps:
                    raise ConfigError(f"unknown layer tag {layer_tag!r}; known: {sorted(taps)}")
                act = taps[layer_tag].data
                if stats is None:
                    stats = ActivationStats.empty(act.shape[1], dataset.num_classes)
                stats.update(act, y)
    finally:
        network.training = was
    return stats


def csi_csv(csi: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["filter_id", "csi"])
    for i, v in enumerate(csi):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


# ----------------------------------------------------------------------------
# Grad-CAM


@dataclass
class Heatmap:
    grid: np.ndarray  # (H, W) in [0, 1]


def bilinear_resize(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear interpolation with edge clamping."""
    h, w = a.shape

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def _normalize(cam: np.ndarray) -> np.ndarray:
    lo, hi = cam.min(), cam.max()
    if hi <= 0:
        return np.zeros_like(cam)
    if hi > lo:
        return (cam - lo) / (hi - lo)
    return np.ones_like(cam)


def grad_cam(network: Network, image: np.ndarray, target_class: int, layer_tag: str,
             score_fn=None) -> Heatmap:
    """Heatmap ``relu(sum_k alpha_k A_k)`` with ``alpha_k`` the spatial mean of
    d(score)/dA_k, min-max normalized and upsampled to the image size.

    ``score_fn(logits, taps)`` may replace the default class logit.
    """
    x = np.asarray(image)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ContractError(f"grad_cam takes a single image, got shape {x.shape}")
    was = network.training
    network.eval()
    params = network.parameters()
    try:
        taps: dict = {}
        with Tape() as tape:
            logits = network(Tensor(x), taps)
            if layer_tag not in taps:
                raise ConfigError(f"unknown layer tag {layer_tag!r}; known: {sorted(taps)}")
            y = score_fn(logits, taps) if score_fn is not None else logits[0, int(target_class)]
        tape.backward(y)
        A = taps[layer_tag]
        grad = A.grad if A.grad is not None else np.zeros_like(A.data)
    finally:
        network.training = was
        for p in params:
            p.grad = None
    alpha = grad[0].astype(np.float64).mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, A.data[0].astype(np.float64), axes=1), 0.0)
    cam = _normalize(cam)
    up = bilinear_resize(cam, x.shape[2], x.shape[3])
    return Heatmap(np.clip(up, 0.0, 1.0))


def encode_pgm(heatmap: Heatmap) -> bytes:
    g = np.clip(np.rint(heatmap.grid * 255), 0, 255).astype(np.uint8)
    h, w = g.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + g.tobytes()


def write_pgm(path, heatmap: Heatmap) -> None:
    Path(path).write_bytes(encode_pgm(heatmap))


def read_pgm(path_or_bytes) -> np.ndarray:
    buf = Path(path_or_bytes).read_bytes() if not isinstance(path_or_bytes, bytes) else path_or_bytes
    magic, dims, maxval, rest = buf.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ContractError("not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)
