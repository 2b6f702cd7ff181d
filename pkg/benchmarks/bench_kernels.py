"""Compare the compiled and numpy convolution kernels, plus one training step.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from afinet import kernels, ops
from afinet.architectures import NetworkConfig, build_network
from afinet.tensor import Tape, Tensor

SHAPES = [  # (B, C, H, W, k, stride)
    (64, 16, 32, 32, 3, 1),
    (64, 32, 16, 16, 3, 1),
    (64, 64, 8, 8, 3, 1),
    (64, 16, 32, 32, 3, 2),
]


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    print(f"{'shape':<28}{'kernel':<10}{'cython ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for B, C, H, W, k, s in SHAPES:
        x = rng.standard_normal((B, C, H, W)).astype(np.float32)
        cols = kernels.numpy_backend.im2col(x, k, s, k // 2)
        cases = {
            "im2col": lambda b: b.im2col(x, k, s, k // 2),
            "col2im": lambda b: b.col2im(cols, x.shape, k, s, k // 2),
        }
        for name, call in cases.items():
            tn = best_of(lambda: call(kernels.numpy_backend), repeats)
            if kernels.compiled_backend is not None:
                tc = best_of(lambda: call(kernels.compiled_backend), repeats)
                row = f"{tc * 1e3:12.2f}{tn * 1e3:12.2f}{tn / tc:10.2f}"
            else:
                row = f"{'n/a':>12}{tn * 1e3:12.2f}{'':>10}"
            print(f"{str((B, C, H, W, k, s)):<28}{name:<10}{row}")


def bench_step(repeats):
    net = build_network(NetworkConfig.from_depth(14, num_classes=4))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 3, 32, 32)).astype(np.float32)
    y = rng.integers(0, 4, 64)

    def step():
        with Tape() as tape:
            loss = ops.cross_entropy(net(Tensor(x)), y)
        tape.backward(loss, params=net.parameters())

    backends = ["python"] + (["cython"] if kernels.compiled_backend is not None else [])
    for name in backends:
        kernels.use(name)
        step()
        print(f"AFI-ResNet-14 forward+backward, batch 64, {name:<7}: {best_of(step, repeats) * 1e3:8.1f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    with threadpool_limits(limits=1):
        bench_kernels(args.repeats)
        bench_step(max(1, args.repeats // 2))


if __name__ == "__main__":
    main()
