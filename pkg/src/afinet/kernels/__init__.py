"""Convolution kernel backends.

The compiled extension is used when importable; otherwise the numpy
fallback.  ``AFINET_KERNELS=python`` forces the fallback.
"""

import os

from . import _numpy as numpy_backend

compiled_backend = None
if os.environ.get("AFINET_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else numpy_backend
BACKEND = "cython" if compiled_backend is not None and _active is compiled_backend else "python"


def use(name):
    """Switch backend at runtime ("cython" or "python")."""
    global _active, BACKEND
    if name == "cython":
        if compiled_backend is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        _active = compiled_backend
    elif name == "python":
        _active = numpy_backend
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def im2col(x, k, stride, pad):
    return _active.im2col(x, k, stride, pad)


def col2im(cols, x_shape, k, stride, pad):
    return _active.col2im(cols, x_shape, k, stride, pad)


def conv2d_direct(x, w, stride, pad, groups=1):
    return _active.conv2d_direct(x, w, stride, pad, groups)
