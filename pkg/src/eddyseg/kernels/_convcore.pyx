# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution core: direct-summation forward/backward with dilation.

Single-threaded on purpose: a fixed reduction order keeps forward and backward
bit-deterministic. Bias is handled by the caller.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                   int stride, int dilation, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t oc = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t eff_h = kh + (kh - 1) * (dilation - 1)
    cdef Py_ssize_t eff_w = kw + (kw - 1) * (dilation - 1)
    cdef Py_ssize_t oh = (h + 2 * pad - eff_h) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * pad - eff_w) // stride + 1

    if real is float:
        out_arr = np.zeros((n, oc, oh, ow), dtype=np.float32)
    else:
        out_arr = np.zeros((n, oc, oh, ow), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_arr

    # Tap-outer layout: for every (ci, ki, kj) tap the inner loop over j reads
    # one x row at stride `stride` and accumulates into one out row, both in
    # memory order. Single-threaded, fixed order, deterministic.
    cdef Py_ssize_t b, o, i, ci, ki, kj, j, i0, y, off, j_lo, j_hi
    cdef real wv
    with nogil:
        for b in range(n):
            for o in range(oc):
                for i in range(oh):
                    i0 = i * stride - pad
                    for ci in range(c):
                        for ki in range(kh):
                            y = i0 + ki * dilation
                            if y < 0 or y >= h:
                                continue
                            for kj in range(kw):
                                off = kj * dilation - pad
                                # valid j range: 0 <= j*stride + off < wd
                                if off >= 0:
                                    j_lo = 0
                                else:
                                    j_lo = (-off + stride - 1) // stride
                                j_hi = (wd - 1 - off) // stride
                                if j_hi > ow - 1:
                                    j_hi = ow - 1
                                wv = w[o, ci, ki, kj]
                                for j in range(j_lo, j_hi + 1):
                                    out[b, o, i, j] += x[b, ci, y, j * stride + off] * wv
    return out_arr


def conv2d_grad_input(real[:, :, :, ::1] dout, real[:, :, :, ::1] w,
                      Py_ssize_t h, Py_ssize_t wd, int stride, int dilation, int pad):
    cdef Py_ssize_t n = dout.shape[0], oc = dout.shape[1]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    cdef Py_ssize_t ic = w.shape[1], kh = w.shape[2], kw = w.shape[3]

    if real is float:
        dx_arr = np.zeros((n, ic, h, wd), dtype=np.float32)
    else:
        dx_arr = np.zeros((n, ic, h, wd), dtype=np.float64)
    cdef real[:, :, :, ::1] dx = dx_arr

    # Scatter form: walk output cells in forward order and accumulate each
    # tap's contribution into dx. Single-threaded, so the order is fixed and
    # the result deterministic. The inner loop over j writes dx rows with
    # stride `stride` and reads dout contiguously.
    cdef Py_ssize_t b, o, i, ki, ci, kj, j, i0, y, off, j_lo, j_hi, xx
    cdef real wv
    with nogil:
        for b in range(n):
            for o in range(oc):
                for i in range(oh):
                    i0 = i * stride - pad
                    for ki in range(kh):
                        y = i0 + ki * dilation
                        if y < 0 or y >= h:
                            continue
                        for ci in range(ic):
                            for kj in range(kw):
                                off = kj * dilation - pad
                                # valid j range: 0 <= j*stride + off < wd
                                if off >= 0:
                                    j_lo = 0
                                else:
                                    j_lo = (-off + stride - 1) // stride
                                j_hi = (wd - 1 - off) // stride
                                if j_hi > ow - 1:
                                    j_hi = ow - 1
                                wv = w[o, ci, ki, kj]
                                for j in range(j_lo, j_hi + 1):
                                    xx = j * stride + off
                                    dx[b, ci, y, xx] += dout[b, o, i, j] * wv
    return dx_arr


def conv2d_grad_weights(real[:, :, :, ::1] dout, real[:, :, :, ::1] x,
                        Py_ssize_t kh, Py_ssize_t kw, int stride, int dilation, int pad):
    cdef Py_ssize_t n = dout.shape[0], oc = dout.shape[1]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    cdef Py_ssize_t ic = x.shape[1], h = x.shape[2], wd = x.shape[3]

    if real is float:
        dw_arr = np.zeros((oc, ic, kh, kw), dtype=np.float32)
    else:
        dw_arr = np.zeros((oc, ic, kh, kw), dtype=np.float64)
    cdef real[:, :, :, ::1] dw = dw_arr

    cdef Py_ssize_t o, ci, ki, kj, b, i, j, y, i0, off, j_lo, j_hi
    cdef real acc
    with nogil:
        for o in range(oc):
            for ci in range(ic):
                for ki in range(kh):
                    for kj in range(kw):
                        off = kj * dilation - pad
                        # valid j range: 0 <= j*stride + off < wd
                        if off >= 0:
                            j_lo = 0
                        else:
                            j_lo = (-off + stride - 1) // stride
                        j_hi = (wd - 1 - off) // stride
                        if j_hi > ow - 1:
                            j_hi = ow - 1
                        acc = 0
                        for b in range(n):
                            for i in range(oh):
                                y = i * stride - pad + ki * dilation
                                if y < 0 or y >= h:
                                    continue
                                for j in range(j_lo, j_hi + 1):
                                    acc += dout[b, o, i, j] * x[b, ci, y, j * stride + off]
                        dw[o, ci, ki, kj] = acc
    return dw_arr
