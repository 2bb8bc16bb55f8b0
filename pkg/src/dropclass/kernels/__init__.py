"""Kernel backend selection.

The compiled Cython extension is preferred when importable; the numpy
backend is the fallback and the only path for float64 inputs (used by the
finite-difference oracle). DROPCLASS_KERNELS=python|compiled|auto overrides
the choice at import time.
"""

from __future__ import annotations

import os

import numpy as np

from . import numpy_backend

_requested = os.environ.get("DROPCLASS_KERNELS", "auto")
if _requested not in ("auto", "compiled", "python"):
    raise ValueError(f"DROPCLASS_KERNELS must be auto|compiled|python, got {_requested!r}")

_compiled = None
if _requested in ("auto", "compiled"):
    try:
        from . import _conv as _compiled  # type: ignore[attr-defined]
    except ImportError:
        if _requested == "compiled":
            raise
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def backend_name() -> str:
    return BACKEND


def _f32(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float32) for a in arrays)


def conv2d_forward(x, k, bias, pad):
    if _compiled is not None and x.dtype == np.float32:
        x, k, bias = _f32(x, k, bias)
        return _compiled.conv2d_forward(x, k, bias, pad)
    return numpy_backend.conv2d_forward(x, k, bias, pad)


def conv2d_backward(x, k, gy, pad, col=None):
    if _compiled is not None and x.dtype == np.float32:
        x, k, gy = _f32(x, k, gy)
        return _compiled.conv2d_backward(x, k, gy, pad, col)
    return numpy_backend.conv2d_backward(x, k, gy, pad, col)


def drop_aggregate_forward(a, s, z, scale):
    zi = -1 if z is None else int(z)
    if _compiled is not None and a.dtype == np.float32:
        a, s = _f32(a, s)
        return _compiled.drop_aggregate_forward(a, s, zi, float(scale))
    return numpy_backend.drop_aggregate_forward(a, s, zi, scale)


def drop_aggregate_backward(a, s, z, scale, gout):
    zi = -1 if z is None else int(z)
    if _compiled is not None and a.dtype == np.float32:
        a, s, gout = _f32(a, s, gout)
        return _compiled.drop_aggregate_backward(a, s, zi, float(scale), gout)
    return numpy_backend.drop_aggregate_backward(a, s, zi, scale, gout)


def relu_backward(x, gy):
    if _compiled is not None and x.dtype == np.float32:
        x, gy = _f32(x, gy)
        return _compiled.relu_backward(x, gy)
    return numpy_backend.relu_backward(x, gy)
