"""Pure-numpy convolution kernels (fallback backend).

Same call surface as the compiled core in ``_convcore``. All routines are
bias-free; bias handling lives in the autodiff layer. Contractions use
``np.einsum`` with the default (non-BLAS) path so results are bit-reproducible
run to run regardless of thread configuration.
"""

import numpy as np


def output_hw(h, w, kh, kw, stride, dilation, pad):
    """Spatial output dims for a conv; raises if they are not positive integers."""
    eff_h = kh + (kh - 1) * (dilation - 1)
    eff_w = kw + (kw - 1) * (dilation - 1)
    num_h = h + 2 * pad - eff_h
    num_w = w + 2 * pad - eff_w
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ValueError(
            f"conv output dims are not positive integers for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, dilation {dilation}, pad {pad}"
        )
    return num_h // stride + 1, num_w // stride + 1


def _tap_slice(k, stride, out_len, dilation):
    start = k * dilation
    return slice(start, start + (out_len - 1) * stride + 1, stride)


def conv2d_forward(x, w, stride, dilation, pad):
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    oh, ow = output_hw(h, wd, kh, kw, stride, dilation, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, oc, oh, ow), dtype=x.dtype)
    for ki in range(kh):
        si = _tap_slice(ki, stride, oh, dilation)
        for kj in range(kw):
            sj = _tap_slice(kj, stride, ow, dilation)
            out += np.einsum("nchw,oc->nohw", xp[:, :, si, sj], w[:, :, ki, kj])
    return out


def conv2d_grad_input(dout, w, h, wd, stride, dilation, pad):
    n, oc, oh, ow = dout.shape
    _, ic, kh, kw = w.shape
    dxp = np.zeros((n, ic, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for ki in range(kh):
        si = _tap_slice(ki, stride, oh, dilation)
        for kj in range(kw):
            sj = _tap_slice(kj, stride, ow, dilation)
            dxp[:, :, si, sj] += np.einsum("nohw,oc->nchw", dout, w[:, :, ki, kj])
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd])
    return dxp


def conv2d_grad_weights(dout, x, kh, kw, stride, dilation, pad):
    n, oc, oh, ow = dout.shape
    _, ic, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dw = np.zeros((oc, ic, kh, kw), dtype=dout.dtype)
    for ki in range(kh):
        si = _tap_slice(ki, stride, oh, dilation)
        for kj in range(kw):
            sj = _tap_slice(kj, stride, ow, dilation)
            dw[:, :, ki, kj] = np.einsum("nchw,nohw->oc", xp[:, :, si, sj], dout)
    return dw
