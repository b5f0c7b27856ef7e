"""Symmetric encoder/decoder segmentation network.

Four downsampling blocks (two 3x3 conv+BN+ReLU, then 2x2 max-pool) feed a
dropout-regularized transition, and four upsampling blocks mirror them: a
2x2 stride-2 transposed conv halves the channels, an additive lateral merge
folds in the matching encoder features through a dilated 3x3 conv, and a
dilated 3x3 conv+BN+ReLU refines the sum. A 1x1 conv plus channel softmax
produces per-pixel class probabilities. Channel ladder with the default
base of 8: down 8-16-32-64, transition 128, up 64-32-16-8.
"""

from dataclasses import dataclass

import numpy as np

from eddyseg.autodiff import (BatchNormState, ConvSpec, Tensor4, add,
                              batchnorm2d, conv2d, conv_transpose2d, dropout,
                              maxpool2d, relu, softmax_channel)

LEVELS = 4
POOL_FACTOR = 2**LEVELS  # input h and w must be divisible by this


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int = 4
    classes: int = 3
    base_channels: int = 8
    dilation_rate: int = 4
    dropout_down: float = 0.3
    dropout_transition: float = 0.5

    def __post_init__(self):
        if self.in_channels < 1 or self.classes < 2 or self.base_channels < 1:
            raise ValueError("channel counts must be positive (classes >= 2)")
        if self.dilation_rate < 1:
            raise ValueError("dilation rate must be >= 1")
        for rate in (self.dropout_down, self.dropout_transition):
            if not 0.0 <= rate < 1.0:
                raise ValueError("dropout rates must lie in [0, 1)")

    @property
    def down_channels(self):
        return tuple(self.base_channels * 2**i for i in range(LEVELS))

    @property
    def transition_channels(self):
        return self.base_channels * 2**LEVELS

    @property
    def up_channels(self):
        return tuple(reversed(self.down_channels))


def shape_trace(spec, height, width=None):
    """(name, channels, h, w) for every stage, checking the lateral wiring.

    Raises ValueError when height or width is not divisible by 16.
    """
    width = height if width is None else width
    if height % POOL_FACTOR or width % POOL_FACTOR:
        raise ValueError(f"input spatial dims must be divisible by {POOL_FACTOR}")
    rows = [("input", spec.in_channels, height, width)]
    skip_dims = []
    h, w = height, width
    for i, ch in enumerate(spec.down_channels, start=1):
        skip_dims.append((ch, h, w))
        h, w = h // 2, w // 2
        rows.append((f"down{i}", ch, h, w))
    rows.append(("transition", spec.transition_channels, h, w))
    for j, ch in enumerate(spec.up_channels, start=1):
        h, w = h * 2, w * 2
        if (ch, h, w) != skip_dims[-j]:
            raise ValueError(f"up{j} does not match its encoder skip dims")
        rows.append((f"up{j}", ch, h, w))
    rows.append(("head", spec.classes, h, w))
    return rows


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape).astype(dtype)


class Network:
    """Parameter container plus the forward pass.

    Parameters live in an insertion-ordered dict; that order is the
    checkpoint enumeration order. Batchnorm running statistics are kept in
    ``bn_states`` and serialized after the parameters.
    """

    def __init__(self, spec, params, bn_states, dtype=np.float32):
        self.spec = spec
        self.params = params
        self.bn_states = bn_states
        self.dtype = np.dtype(dtype).type

    def named_parameters(self):
        return dict(self.params)

    def parameter_count(self):
        return sum(int(np.prod(t.dims)) for t in self.params.values())

    def named_state(self):
        """Every persistent array: parameters first (enumeration order),
        then running_mean/running_var per batchnorm."""
        state = {name: t.data for name, t in self.params.items()}
        for key, bn in self.bn_states.items():
            state[f"{key}.running_mean"] = bn.running_mean
            state[f"{key}.running_var"] = bn.running_var
        return state

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def _conv_bn_relu(self, x, block, idx, mode, rate=1):
        p = self.params
        w = p[f"{block}.conv{idx}.w"]
        spec = ConvSpec.same(w.dims[1], w.dims[0], w.dims[2], dilation=rate)
        y = conv2d(x, w, p[f"{block}.conv{idx}.b"], spec)
        y = batchnorm2d(y, p[f"{block}.bn{idx}.gamma"], p[f"{block}.bn{idx}.beta"],
                        self.bn_states[f"{block}.bn{idx}"], mode)
        return relu(y)

    def forward(self, batch, mode="train", rng=None):
        """(n, in_channels, h, w) batch -> (n, classes, h, w) probabilities.

        mode "train" uses batch statistics and active dropout (rng
        required); "eval" uses running statistics and identity dropout.
        """
        spec = self.spec
        n, c, h, w = batch.dims
        if c != spec.in_channels:
            raise ValueError(f"expected {spec.in_channels} input channels, got {c}")
        if h % POOL_FACTOR or w % POOL_FACTOR:
            raise ValueError(f"input spatial dims must be divisible by {POOL_FACTOR}")
        p = self.params

        a = batch
        skips = []
        for i in range(1, LEVELS + 1):
            a = self._conv_bn_relu(a, f"down{i}", 1, mode)
            a = self._conv_bn_relu(a, f"down{i}", 2, mode)
            skips.append(a)
            a = maxpool2d(a)
            if i == LEVELS:
                a = dropout(a, spec.dropout_down, mode, rng)

        a = self._conv_bn_relu(a, "trans", 1, mode)
        a = self._conv_bn_relu(a, "trans", 2, mode)
        a = dropout(a, spec.dropout_transition, mode, rng)

        for j in range(1, LEVELS + 1):
            a = conv_transpose2d(a, p[f"up{j}.deconv.w"], p[f"up{j}.deconv.b"])
            a = lateral_merge(a, skips[-j], p[f"up{j}.skip.w"], p[f"up{j}.skip.b"],
                              spec.dilation_rate)
            block = f"up{j}"
            wconv = p[f"{block}.conv.w"]
            cspec = ConvSpec.same(wconv.dims[1], wconv.dims[0], wconv.dims[2],
                                  dilation=spec.dilation_rate)
            a = conv2d(a, wconv, p[f"{block}.conv.b"], cspec)
            a = batchnorm2d(a, p[f"{block}.bn.gamma"], p[f"{block}.bn.beta"],
                            self.bn_states[f"{block}.bn"], mode)
            a = relu(a)

        head = ConvSpec.same(spec.up_channels[-1], spec.classes, 1)
        logits = conv2d(a, p["head.w"], p["head.b"], head)
        return softmax_channel(logits)


def lateral_merge(high, skip, w, b, rate):
    """Additive lateral connection: dilated 3x3 conv of the encoder skip,
    summed with the decoder features. Both inputs must have equal dims."""
    if high.dims != skip.dims:
        raise ValueError("lateral merge requires equal decoder/skip dims")
    spec = ConvSpec.same(w.dims[1], w.dims[0], w.dims[2], dilation=rate)
    return add(conv2d(skip, w, b, spec), high)


def build_network(spec, rng, dtype=np.float32):
    """Fresh network with He-style fan-in uniform init.

    Conv and deconv weights draw from U(-sqrt(6/fan_in), +sqrt(6/fan_in));
    biases and BN betas start at zero, BN gammas at one. The 1x1 head
    weights start at zero so an untrained network predicts the uniform
    distribution (cross-entropy ln 3) in both modes. Draw order equals
    parameter enumeration order, so one seed fixes every value.
    """
    params = {}
    bn_states = {}
    dtype = np.dtype(dtype).type

    def conv_param(name, out_c, in_c, k):
        fan_in = in_c * k * k
        params[f"{name}.w"] = Tensor4(
            _he_uniform(rng, (out_c, in_c, k, k), fan_in, dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor4(np.zeros((1, out_c, 1, 1), dtype=dtype),
                                     requires_grad=True)

    def deconv_param(name, in_c, out_c):
        fan_in = in_c * 4
        params[f"{name}.w"] = Tensor4(
            _he_uniform(rng, (in_c, out_c, 2, 2), fan_in, dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor4(np.zeros((1, out_c, 1, 1), dtype=dtype),
                                     requires_grad=True)

    def bn_param(name, c):
        params[f"{name}.gamma"] = Tensor4(np.ones((1, c, 1, 1), dtype=dtype),
                                         requires_grad=True)
        params[f"{name}.beta"] = Tensor4(np.zeros((1, c, 1, 1), dtype=dtype),
                                        requires_grad=True)
        bn_states[name] = BatchNormState.create(c, dtype=dtype)

    def double_conv(block, in_c, out_c):
        conv_param(f"{block}.conv1", out_c, in_c, 3)
        bn_param(f"{block}.bn1", out_c)
        conv_param(f"{block}.conv2", out_c, out_c, 3)
        bn_param(f"{block}.bn2", out_c)

    prev = spec.in_channels
    for i, ch in enumerate(spec.down_channels, start=1):
        double_conv(f"down{i}", prev, ch)
        prev = ch
    double_conv("trans", prev, spec.transition_channels)
    prev = spec.transition_channels
    for j, ch in enumerate(spec.up_channels, start=1):
        deconv_param(f"up{j}.deconv", prev, ch)
        conv_param(f"up{j}.skip", ch, ch, 3)
        conv_param(f"up{j}.conv", ch, ch, 3)
        bn_param(f"up{j}.bn", ch)
        prev = ch
    params["head.w"] = Tensor4(np.zeros((spec.classes, prev, 1, 1), dtype=dtype),
                               requires_grad=True)
    params["head.b"] = Tensor4(np.zeros((1, spec.classes, 1, 1), dtype=dtype),
                               requires_grad=True)
    return Network(spec, params, bn_states, dtype=dtype)
