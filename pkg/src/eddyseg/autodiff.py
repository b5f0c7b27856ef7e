"""Rank-4 tensors with a reverse-mode differentiation tape.

Everything is a dense (batch, channel, height, width) array in float32 or
float64; scalars are (1, 1, 1, 1). Ops executed while a :class:`Tape` is
active are recorded and can be differentiated once with ``tape.backward``.
Every op validates that its output is finite and raises ``NonFiniteError``
otherwise instead of letting NaN/Inf propagate.

float64 exists for finite-difference gradient checking; training runs in
float32.
"""

from dataclasses import dataclass, field

import numpy as np

from eddyseg import kernels

FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse: reused backward pass or bad root."""


def _check_finite(arr, op_name):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in output of {op_name}")


class Tensor4:
    """Dense rank-4 array, optionally tracked for gradients.

    ``grad`` is populated (accumulated) by ``Tape.backward`` for tensors with
    ``requires_grad=True`` that participated in recorded ops.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ValueError(f"Tensor4 needs 4 dims, got shape {data.shape}")
        if data.dtype not in FLOAT_DTYPES:
            data = data.astype(np.float32)
        _check_finite(data, "Tensor4()")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor {self.dims}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor4(dims={self.dims}, dtype={self.data.dtype}{flag})"


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor4(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def scalar_of(value, dtype):
    return Tensor4(np.full((1, 1, 1, 1), value, dtype=dtype))


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_TAPE_STACK = []


class Tape:
    """Ordered record of differentiable ops; one backward pass per tape."""

    def __init__(self):
        self.nodes = []
        self._spent = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    @staticmethod
    def current():
        return _TAPE_STACK[-1] if _TAPE_STACK else None

    def backward(self, loss):
        """Accumulate grads of ``loss`` into every requires_grad participant."""
        if self._spent:
            raise TapeError("tape already consumed by a backward pass")
        if loss.dims != (1, 1, 1, 1):
            raise TapeError(f"backward root must be scalar (1,1,1,1), got {loss.dims}")
        if not any(node.output is loss for node in self.nodes):
            raise TapeError("loss was not computed under this tape")
        self._spent = True

        flowing = {id(loss): np.ones((1, 1, 1, 1), dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g_out = flowing.get(id(node.output))
            if g_out is None:
                continue
            grads = node.backward_fn(g_out)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                prev = flowing.get(id(inp))
                flowing[id(inp)] = g if prev is None else prev + g

        for node in self.nodes:
            for inp in node.inputs:
                g = flowing.get(id(inp))
                if g is not None and inp.requires_grad:
                    inp.accumulate_grad(g)
                    del flowing[id(inp)]


def record(op, inputs, output, backward_fn):
    """Put a node on the active tape if any input is being differentiated."""
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.nodes.append(_Node(op, tuple(inputs), output, backward_fn))
    return output


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.dilation < 1:
            raise ValueError("dilation rate must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def effective_kernel(self):
        """Kernel extent in cells once dilation gaps are counted."""
        kh, kw = self.kernel
        r = self.dilation
        return (kh + (kh - 1) * (r - 1), kw + (kw - 1) * (r - 1))

    def param_count(self):
        """Independent of the dilation rate: zero taps carry no parameters."""
        kh, kw = self.kernel
        n = self.in_channels * self.out_channels * kh * kw
        return n + (self.out_channels if self.has_bias else 0)

    @classmethod
    def same(cls, in_channels, out_channels, kernel=3, dilation=1, has_bias=True):
        """Stride-1 spec padded so spatial dims are preserved."""
        pad = dilation * (kernel - 1) // 2
        return cls(in_channels, out_channels, (kernel, kernel), 1, dilation, pad, has_bias)


def conv2d(x, w, b, spec):
    """2-D (optionally dilated) convolution of x[n,c,h,w] with w[oc,ic,kh,kw].

    Bias is a (1, oc, 1, 1) tensor or None per ``spec.has_bias``.
    """
    if x.dims[1] != spec.in_channels:
        raise ValueError(f"conv2d: input has {x.dims[1]} channels, spec wants {spec.in_channels}")
    if w.dims != (spec.out_channels, spec.in_channels) + tuple(spec.kernel):
        raise ValueError(f"conv2d: weight dims {w.dims} do not match spec {spec}")
    if spec.has_bias != (b is not None):
        raise ValueError("conv2d: bias presence does not match spec.has_bias")
    if b is not None and b.dims != (1, spec.out_channels, 1, 1):
        raise ValueError(f"conv2d: bias dims {b.dims}, expected (1, {spec.out_channels}, 1, 1)")
    if x.dtype != w.dtype or (b is not None and b.dtype != w.dtype):
        raise ValueError(f"conv2d: mixed dtypes (input {x.dtype}, weight {w.dtype})")

    y = kernels.conv2d_forward(x.data, w.data, spec.stride, spec.dilation, spec.padding)
    if b is not None:
        y = y + b.data
    _check_finite(y, "conv2d")
    out = Tensor4(y, requires_grad=x.requires_grad or w.requires_grad
                  or (b is not None and b.requires_grad))

    x_data, w_data = x.data, w.data
    h, wd = x.dims[2], x.dims[3]
    kh, kw = spec.kernel

    def backward_fn(g):
        dx = dw = db = None
        if x.requires_grad:
            dx = kernels.conv2d_grad_input(g, w_data, h, wd,
                                           spec.stride, spec.dilation, spec.padding)
        if w.requires_grad:
            dw = kernels.conv2d_grad_weights(g, x_data, kh, kw,
                                             spec.stride, spec.dilation, spec.padding)
        if b is not None and b.requires_grad:
            db = g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        return (dx, dw, db) if b is not None else (dx, dw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record("conv2d", inputs, out, backward_fn)


def conv_transpose2d(x, w, b):
    """2x2 stride-2 transposed convolution: doubles h and w.

    Weights are (in_c, out_c, 2, 2); windows do not overlap so forward and
    backward are plain reshuffles. The input grad is the matching stride-2
    conv2d of the upstream grad.
    """
    n, c, h, wd = x.dims
    if w.dims[0] != c or w.dims[2:] != (2, 2):
        raise ValueError(f"conv_transpose2d: weight dims {w.dims} do not match input {x.dims}")
    oc = w.dims[1]
    if b is not None and b.dims != (1, oc, 1, 1):
        raise ValueError(f"conv_transpose2d: bias dims {b.dims}")
    if x.dtype != w.dtype or (b is not None and b.dtype != w.dtype):
        raise ValueError(f"conv_transpose2d: mixed dtypes (input {x.dtype}, weight {w.dtype})")

    # Non-overlapping windows make this a single matmul per direction:
    # (n*h*w, in_c) @ (in_c, out_c*4), then reshuffle the 2x2 taps into place.
    xm = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * wd, c)
    y6 = (xm @ w.data.reshape(c, oc * 4)).reshape(n, h, wd, oc, 2, 2)
    y = np.ascontiguousarray(y6.transpose(0, 3, 1, 4, 2, 5)).reshape(n, oc, 2 * h, 2 * wd)
    if b is not None:
        y = y + b.data
    _check_finite(y, "conv_transpose2d")
    out = Tensor4(y, requires_grad=x.requires_grad or w.requires_grad
                  or (b is not None and b.requires_grad))

    w_data = w.data

    def backward_fn(g):
        gv = g.reshape(n, oc, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5)
        gm = np.ascontiguousarray(gv).reshape(n * h * wd, oc * 4)
        dx = dw = db = None
        if x.requires_grad:
            dxm = gm @ w_data.reshape(c, oc * 4).T
            dx = np.ascontiguousarray(dxm.reshape(n, h, wd, c).transpose(0, 3, 1, 2))
        if w.requires_grad:
            dw = (xm.T @ gm).reshape(c, oc, 2, 2)
        if b is not None and b.requires_grad:
            db = g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        return (dx, dw, db) if b is not None else (dx, dw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record("conv_transpose2d", inputs, out, backward_fn)


# ---------------------------------------------------------------------------
# Pooling / normalization / pointwise
# ---------------------------------------------------------------------------


def maxpool2d(x):
    """2x2 max pooling, stride 2. Ties route the grad to the first window
    element in row-major order."""
    n, c, h, w = x.dims
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)  # first occurrence == row-major tie rule
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    _check_finite(y, "maxpool2d")
    out = Tensor4(y, requires_grad=x.requires_grad)

    def backward_fn(g):
        dflat = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dx = (dflat.reshape(n, c, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
        return (dx,)

    return record("maxpool2d", (x,), out, backward_fn)


@dataclass
class BatchNormState:
    """Per-layer running statistics, mutated by train-mode forward passes."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels, dtype=np.float32, momentum=0.9, eps=1e-5):
        shape = (1, channels, 1, 1)
        return cls(np.zeros(shape, dtype=dtype), np.ones(shape, dtype=dtype),
                   momentum, eps)


def batchnorm2d(x, gamma, beta, state, mode):
    """Per-channel batch normalization over the (n, h, w) axes.

    Train mode normalizes with batch statistics and updates the running
    stats; eval mode uses the running stats. gamma/beta are (1, c, 1, 1).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")
    n, c, h, w = x.dims
    if gamma.dims != (1, c, 1, 1) or beta.dims != (1, c, 1, 1):
        raise ValueError("batchnorm2d: gamma/beta dims must be (1, c, 1, 1)")
    eps = state.eps

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm2d train mode needs n*h*w >= 2 per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        mom = state.momentum
        state.running_mean = (mom * state.running_mean + (1 - mom) * mu).astype(x.dtype)
        state.running_var = (mom * state.running_var + (1 - mom) * var).astype(x.dtype)
    else:
        mu = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    y = gamma.data * xhat + beta.data
    _check_finite(y, "batchnorm2d")
    out = Tensor4(y, requires_grad=x.requires_grad or gamma.requires_grad
                  or beta.requires_grad)

    gamma_data = gamma.data

    def backward_fn(g):
        dgamma = dbeta = dx = None
        if gamma.requires_grad:
            dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        if beta.requires_grad:
            dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        if x.requires_grad:
            if mode == "train":
                m = n * h * w
                gsum = g.sum(axis=(0, 2, 3), keepdims=True)
                gx = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = gamma_data * inv_std * (g - gsum / m - xhat * gx / m)
            else:
                dx = gamma_data * inv_std * g
        return (dx, dgamma, dbeta)

    return record("batchnorm2d", (x, gamma, beta), out, backward_fn)


def relu(x):
    y = np.maximum(x.data, 0)
    out = Tensor4(y, requires_grad=x.requires_grad)
    mask = x.data > 0  # grad is 0 at exactly 0

    def backward_fn(g):
        return (g * mask,)

    return record("relu", (x,), out, backward_fn)


def add(x, y):
    if x.dims != y.dims:
        raise ValueError(f"add: dims mismatch {x.dims} vs {y.dims}")
    z = x.data + y.data
    _check_finite(z, "add")
    out = Tensor4(z, requires_grad=x.requires_grad or y.requires_grad)

    def backward_fn(g):
        return (g, g)

    return record("add", (x, y), out, backward_fn)


def dropout(x, rate, mode, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time so
    eval is a bitwise identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.dims) >= rate)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    factor = keep * scale
    y = x.data * factor
    out = Tensor4(y, requires_grad=x.requires_grad)

    def backward_fn(g):
        return (g * factor,)

    return record("dropout", (x,), out, backward_fn)


def softmax_channel(x):
    """Softmax across the channel axis, per pixel."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    _check_finite(y, "softmax_channel")
    out = Tensor4(y, requires_grad=x.requires_grad)

    def backward_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return record("softmax_channel", (x,), out, backward_fn)


def tensor_sum(x, weights=None):
    """Scalar sum(x) or sum(x * weights) for a constant weight array."""
    if weights is None:
        total = x.data.sum()
    else:
        if weights.shape != x.dims:
            raise ValueError("tensor_sum: weights shape mismatch")
        total = (x.data * weights).sum()
    out = scalar_of(total, x.dtype)
    _check_finite(out.data, "tensor_sum")
    out.requires_grad = x.requires_grad

    def backward_fn(g):
        s = g.reshape(())
        if weights is None:
            return (np.full(x.dims, s, dtype=x.dtype),)
        return ((weights * s).astype(x.dtype, copy=False),)

    return record("tensor_sum", (x,), out, backward_fn)
