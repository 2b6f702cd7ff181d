"""Forward Euler vs. linear multistep integration, and the concat/conv
kernel-split identity linking multistep reuse to the AFI block.

Residual blocks read as unit-step forward Euler updates
``y_i = y_{i-1} + h f(x_{i-1}, y_{i-1})``; an AFI block mixes several
earlier evaluations, like an explicit multistep scheme.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .errors import ContractError, NumericError
from .tensor import Tensor, no_grad

ADAMS_BASHFORTH_2 = (1.5, -0.5)


@dataclass
class OdeProblem:
    f: Callable[[float, np.ndarray], np.ndarray]
    y0: float | np.ndarray
    x0: float = 0.0
    x_end: float = 1.0
    h: float = 0.1

    def __post_init__(self):
        if not self.h > 0:
            raise ContractError(f"step h must be positive, got {self.h}")

    @property
    def steps(self) -> int:
        return int(round((self.x_end - self.x0) / self.h))

    def grid(self) -> np.ndarray:
        return self.x0 + self.h * np.arange(self.steps + 1)


@dataclass(frozen=True)
class LmmScheme:
    """Explicit k-step scheme ``y_i = y_{i-1} + h * sum_j a_j f_{i-j}``.

    ``coefficients[0]`` weights the newest derivative evaluation.
    """

    coefficients: tuple[float, ...]

    @property
    def window(self) -> int:
        return len(self.coefficients)

    @property
    def consistent(self) -> bool:
        return math.isclose(sum(self.coefficients), 1.0)


@dataclass
class Trajectory:
    x: np.ndarray
    y: np.ndarray


def _check(y, i):
    if not np.all(np.isfinite(y)):
        raise NumericError(f"non-finite state at step {i}")


def euler_solve(problem: OdeProblem) -> Trajectory:
    xs = problem.grid()
    ys = [np.asarray(problem.y0, dtype=np.float64)]
    h = problem.h
    for i in range(1, len(xs)):
        y = ys[-1] + h * np.asarray(problem.f(xs[i - 1], ys[-1]))
        _check(y, i)
        ys.append(y)
    return Trajectory(xs, np.array(ys))


def _bootstrap(problem: OdeProblem, n: int, refine: int = 100) -> list[np.ndarray]:
    """First ``n`` states after y0 by forward Euler at step h/refine."""
    out = []
    y = np.asarray(problem.y0, dtype=np.float64)
    x = problem.x0
    hs = problem.h / refine
    for _ in range(n):
        for _ in range(refine):
            y = y + hs * np.asarray(problem.f(x, y))
            x += hs
        out.append(y)
    return out


def lmm_solve(problem: OdeProblem, scheme: LmmScheme) -> Trajectory:
    xs = problem.grid()
    k = scheme.window
    if k < 1:
        raise ContractError("scheme needs at least one coefficient")
    if k > len(xs):
        raise ContractError(f"window {k} exceeds the {len(xs)} grid points available")
    h = problem.h
    ys = [np.asarray(problem.y0, dtype=np.float64)]
    if k > 1:
        ys += _bootstrap(problem, k - 1)
    fs = [np.asarray(problem.f(xs[j], ys[j])) for j in range(len(ys))]
    for i in range(len(ys), len(xs)):
        step = sum(a * fs[i - 1 - j] for j, a in enumerate(scheme.coefficients))
        y = ys[-1] + h * step
        _check(y, i)
        ys.append(y)
        fs.append(np.asarray(problem.f(xs[i], y)))
    return Trajectory(xs, np.array(ys))


def global_error(solver: Callable[[OdeProblem], Trajectory], problem: OdeProblem,
                 exact: Callable[[float], float]) -> float:
    traj = solver(problem)
    return float(np.max(np.abs(traj.y[-1] - exact(traj.x[-1]))))


def convergence_order(solver: Callable[[OdeProblem], Trajectory], problem: OdeProblem,
                      exact: Callable[[float], float], steps: Sequence[float]) -> tuple[float, list]:
    """Least-squares slope of log(error) against log(h).

    Returns ``(slope, [(h, error), ...])``; the slope is ``inf`` when the
    solver is exact on every grid.
    """
    if len(steps) < 4:
        raise ContractError("need at least four step sizes")
    rows = []
    for h in steps:
        p = OdeProblem(problem.f, problem.y0, problem.x0, problem.x_end, h)
        rows.append((h, global_error(solver, p, exact)))
    errors = np.array([e for _, e in rows])
    if np.all(errors == 0):
        return math.inf, rows
    if np.any(errors == 0):
        raise NumericError("error vanished on part of the grid; slope undefined")
    slope = np.polyfit(np.log([h for h, _ in rows]), np.log(errors), 1)[0]
    return float(slope), rows


def convergence_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["h", "error"])
    for h, e in rows:
        w.writerow([repr(float(h)), repr(float(e))])
    return buf.getvalue()


# ----------------------------------------------------------------------------
# kernel-split identity


@dataclass
class SplitIdentity:
    split_deviation: float
    shared_deviation: float


def concat_conv_split_identity(x: np.ndarray, r: np.ndarray, k2: np.ndarray, pad: int | None = None) -> SplitIdentity:
    """Check conv([x, r], K) == conv(x, K_x) + conv(r, K_r), where K_x/K_r
    are the input-channel slices of K, and the shared-kernel special case
    conv([x, r], [K; K]) == conv(x + r, K).

    Inputs are promoted to float64 so the deviation reflects the algebra
    rather than float32 accumulation error.
    """
    x, r, k2 = (np.asarray(a, dtype=np.float64) for a in (x, r, k2))
    if x.shape != r.shape:
        raise ContractError(f"x {x.shape} and r {r.shape} must match")
    c = x.shape[1]
    if k2.shape[1] != 2 * c:
        raise ContractError(f"kernel takes {k2.shape[1]} channels, expected {2 * c}")
    pad = k2.shape[2] // 2 if pad is None else pad
    with no_grad():
        conv = lambda a, k: ops.conv2d(Tensor(a, dtype=np.float64), Tensor(k, dtype=np.float64), 1, pad).data  # noqa: E731
        joint = conv(np.concatenate([x, r], axis=1), k2)
        split = conv(x, k2[:, :c]) + conv(r, k2[:, c:])
        shared_k = k2[:, :c]
        shared_joint = conv(np.concatenate([x, r], axis=1), np.concatenate([shared_k, shared_k], axis=1))
        shared_sum = conv(x + r, shared_k)
    return SplitIdentity(float(np.max(np.abs(joint - split))), float(np.max(np.abs(shared_joint - shared_sum))))
