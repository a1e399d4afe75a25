"""Hot loops behind convolution and bilinear sampling.

The compiled Cython module is used when it imports; otherwise the numpy
implementation is selected.  Set ``CDVAE_KERNELS=python`` to force the
fallback (the benchmark and the parity tests do this).
"""
from __future__ import annotations

import os

import numpy as np

from . import _numpy

_FORCE_PY = os.environ.get("CDVAE_KERNELS", "").lower() in {"python", "numpy", "py"}

try:
    if _FORCE_PY:
        raise ImportError("fallback requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _numpy
    BACKEND = "numpy"


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(_c(x), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    return _impl.col2im(_c(cols), tuple(int(s) for s in shape), kh, kw, stride, pad)


def bilinear_forward(x, px, py):
    x = _c(x)
    return _impl.bilinear_forward(x, _c(px.astype(x.dtype, copy=False)), _c(py.astype(x.dtype, copy=False)))


def bilinear_backward(x, px, py, gout):
    x = _c(x)
    return _impl.bilinear_backward(
        x, _c(px.astype(x.dtype, copy=False)), _c(py.astype(x.dtype, copy=False)), _c(gout.astype(x.dtype, copy=False))
    )


__all__ = ["BACKEND", "im2col", "col2im", "bilinear_forward", "bilinear_backward"]
