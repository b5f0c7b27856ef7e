"""Architecture wiring: parameter budget, shapes, determinism, dilation."""

import math

import numpy as np
import pytest

from eddyseg.autodiff import Tensor4
from eddyseg.losses import cross_entropy
from eddyseg.network import Network, NetworkSpec, build_network, shape_trace

import oracles


def small_net(seed=0, **kw):
    spec = NetworkSpec(**kw) if kw else NetworkSpec()
    return build_network(spec, np.random.default_rng(seed)), spec


# ---------------------------------------------------------------------------
# spec and shape bookkeeping
# ---------------------------------------------------------------------------


def test_channel_ladder():
    spec = NetworkSpec()
    assert spec.down_channels == (8, 16, 32, 64)
    assert spec.transition_channels == 128
    assert spec.up_channels == (64, 32, 16, 8)


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(classes=1)
    with pytest.raises(ValueError):
        NetworkSpec(dilation_rate=0)
    with pytest.raises(ValueError):
        NetworkSpec(dropout_down=1.0)


def test_shape_trace_levels():
    rows = shape_trace(NetworkSpec(), 64)
    named = {name: (c, h, w) for name, c, h, w in rows}
    assert named["input"] == (4, 64, 64)
    assert named["down1"] == (8, 32, 32)
    assert named["down4"] == (64, 4, 4)
    assert named["transition"] == (128, 4, 4)
    assert named["up1"] == (64, 8, 8)
    assert named["up4"] == (8, 64, 64)
    assert named["head"] == (3, 64, 64)


def test_shape_trace_rectangular():
    rows = shape_trace(NetworkSpec(), 16, 128)
    assert rows[-1][2:] == (16, 128)


def test_shape_trace_rejects_mod16_violations():
    for h, w in [(60, 64), (64, 60), (8, 8)]:
        with pytest.raises(ValueError):
            shape_trace(NetworkSpec(), h, w)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def test_parameter_count_against_oracle():
    net, _ = small_net()
    assert net.parameter_count() == oracles.network_param_count_oracle()


def test_parameter_count_default_is_438179():
    net, _ = small_net()
    assert net.parameter_count() == 438179


def test_dilation_rate_does_not_change_param_count():
    a, _ = small_net(dilation_rate=4)
    b, _ = small_net(dilation_rate=1)
    assert a.parameter_count() == b.parameter_count()
    assert set(a.params) == set(b.params)


def test_build_is_deterministic():
    a, _ = small_net(seed=7)
    b, _ = small_net(seed=7)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data), name


def test_different_seeds_differ():
    a, _ = small_net(seed=0)
    b, _ = small_net(seed=1)
    assert any(not np.array_equal(a.params[n].data, b.params[n].data)
               for n in a.params)


def test_named_state_includes_bn_stats():
    net, spec = small_net()
    state = net.named_state()
    assert "down1.bn1.running_mean" in state
    assert "trans.bn2.running_var" in state
    n_bn = sum(1 for k in state if k.endswith("running_mean"))
    assert n_bn == len(net.bn_states) == 2 * 4 + 2 + 4


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def test_forward_shapes_and_probabilities():
    net, spec = small_net()
    x = Tensor4(np.random.default_rng(1).standard_normal((2, 4, 32, 32)).astype(np.float32))
    probs = net.forward(x, mode="eval")
    assert probs.dims == (2, 3, 32, 32)
    assert np.all(probs.data >= 0)
    assert np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-5)


def test_forward_rejects_bad_inputs():
    net, _ = small_net()
    with pytest.raises(ValueError):
        net.forward(Tensor4(np.zeros((1, 3, 32, 32))), mode="eval")
    with pytest.raises(ValueError):
        net.forward(Tensor4(np.zeros((1, 4, 30, 32))), mode="eval")
    with pytest.raises(ValueError):  # f64 input into an f32 network
        net.forward(Tensor4(np.zeros((1, 4, 32, 32), dtype=np.float64)), mode="eval")


def test_train_mode_needs_rng_for_dropout():
    net, _ = small_net()
    x = Tensor4(np.random.default_rng(2).standard_normal((2, 4, 16, 16)).astype(np.float32))
    with pytest.raises(ValueError):
        net.forward(x, mode="train")
    net.forward(x, mode="train", rng=np.random.default_rng(0))


def test_eval_forward_is_deterministic():
    net, _ = small_net(seed=3)
    x = Tensor4(np.random.default_rng(4).standard_normal((1, 4, 16, 16)).astype(np.float32))
    a = net.forward(x, mode="eval").data
    b = net.forward(x, mode="eval").data
    assert np.array_equal(a, b)


def test_custom_channel_spec_forward():
    net, spec = small_net(in_channels=1, base_channels=2)
    x = Tensor4(np.random.default_rng(5).standard_normal((1, 1, 16, 16)).astype(np.float32))
    probs = net.forward(x, mode="eval")
    assert probs.dims == (1, 3, 16, 16)


def test_rate1_and_rate4_share_shapes_but_not_outputs():
    rng = np.random.default_rng(6)
    x = Tensor4(rng.standard_normal((1, 4, 32, 32)).astype(np.float32))
    n4, _ = small_net(seed=8, dilation_rate=4)
    # the head starts at zero (uniform output); randomize it so the two
    # dilation settings can actually disagree
    hw = n4.params["head.w"]
    hw.data = rng.standard_normal(hw.dims).astype(np.float32)
    n1 = Network(n4.spec.__class__(dilation_rate=1),
                 n4.params, n4.bn_states, dtype=n4.dtype)
    p4 = n4.forward(x, mode="eval").data
    p1 = n1.forward(x, mode="eval").data
    assert p4.shape == p1.shape
    assert not np.allclose(p4, p1)


def test_untrained_network_predicts_uniform():
    # zero-initialized head: logits are exactly zero, so the softmax is
    # uniform and cross-entropy equals ln 3 whatever the labels say
    net, _ = small_net(seed=9)
    rng = np.random.default_rng(10)
    x = Tensor4(rng.standard_normal((2, 4, 32, 32)).astype(np.float32))
    probs = net.forward(x, mode="eval")
    assert np.allclose(probs.data, 1.0 / 3.0, atol=1e-6)
    classes = rng.integers(0, 3, (2, 32, 32))
    ce = cross_entropy(probs, classes).item()
    assert abs(ce - math.log(3.0)) < 0.1
