"""Convolution kernel backend selection.

Prefers the compiled Cython core, falls back to numpy. ``EDDYSEG_BACKEND``
(``cython`` or ``numpy``) forces a backend; forcing ``cython`` when the
extension is missing raises, forcing is mainly for the benchmark and tests.
"""

import os

import numpy as np

from eddyseg.kernels import npconv
from eddyseg.kernels.npconv import output_hw

_forced = os.environ.get("EDDYSEG_BACKEND", "").strip().lower()

if _forced == "numpy":
    _impl = npconv
    BACKEND = "numpy"
else:
    try:
        from eddyseg.kernels import _convcore as _impl
        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise
        _impl = npconv
        BACKEND = "numpy"


def _c(a):
    return np.ascontiguousarray(a)


def conv2d_forward(x, w, stride, dilation, pad):
    """y[n,o,i,j] = sum_{c,ki,kj} x[n,c,i*s-p+ki*d, j*s-p+kj*d] * w[o,c,ki,kj]."""
    output_hw(x.shape[2], x.shape[3], w.shape[2], w.shape[3], stride, dilation, pad)
    return _impl.conv2d_forward(_c(x), _c(w), stride, dilation, pad)


def conv2d_grad_input(dout, w, h, wd, stride, dilation, pad):
    return _impl.conv2d_grad_input(_c(dout), _c(w), h, wd, stride, dilation, pad)


def conv2d_grad_weights(dout, x, kh, kw, stride, dilation, pad):
    return _impl.conv2d_grad_weights(_c(dout), _c(x), kh, kw, stride, dilation, pad)
