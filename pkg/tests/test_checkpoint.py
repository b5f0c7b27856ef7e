"""Checkpoint format: bitwise round trips and corruption detection."""

import struct

import numpy as np
import pytest

from eddyseg.autodiff import Tensor4
from eddyseg.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    load_network,
    save_checkpoint,
    save_network,
)
from eddyseg.network import NetworkSpec, build_network


def fresh_net(seed=0):
    return build_network(NetworkSpec(), np.random.default_rng(seed))


def test_array_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {
        "a.w": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
        "a.b": rng.standard_normal((1, 3, 1, 1)).astype(np.float32),
        "scalarish": np.float32(rng.standard_normal(7)),
    }
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert list(back) == list(arrays)
    for name in arrays:
        assert back[name].dtype == np.float32
        assert np.array_equal(back[name], arrays[name])


def test_save_twice_is_byte_identical(tmp_path):
    net = fresh_net(2)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_network(p1, net)
    save_network(p2, net)
    assert p1.read_bytes() == p2.read_bytes()


def test_network_round_trip_restores_everything(tmp_path):
    net = fresh_net(3)
    # make running stats nontrivial before saving
    x = Tensor4(np.random.default_rng(4).standard_normal((2, 4, 16, 16)).astype(np.float32))
    net.forward(x, mode="train", rng=np.random.default_rng(5))
    path = tmp_path / "n.ckpt"
    save_network(path, net)
    back = load_network(path)
    for name, t in net.params.items():
        assert np.array_equal(back.params[name].data, t.data), name
    for key, bn in net.bn_states.items():
        assert np.array_equal(back.bn_states[key].running_mean, bn.running_mean)
        assert np.array_equal(back.bn_states[key].running_var, bn.running_var)
    # and the rebuilt network computes the same function
    a = net.forward(x, mode="eval").data
    b = back.forward(x, mode="eval").data
    assert np.array_equal(a, b)


def test_load_network_accepts_optional_norm_keys(tmp_path):
    net = fresh_net(6)
    state = net.named_state()
    state["norm.mean"] = np.zeros(4, dtype=np.float32)
    state["norm.std"] = np.ones(4, dtype=np.float32)
    path = tmp_path / "n.ckpt"
    save_checkpoint(path, state)
    back = load_network(path)
    assert back.parameter_count() == net.parameter_count()
    # the raw mapping still carries them for callers that want the stats
    raw = load_checkpoint(path)
    assert "norm.mean" in raw and "norm.std" in raw


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 10)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(MAGIC + struct.pack("<HI", 9, 0))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncation_rejected(tmp_path):
    net = fresh_net(7)
    path = tmp_path / "n.ckpt"
    save_network(path, net)
    blob = path.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(cut)


def test_trailing_bytes_rejected(tmp_path):
    net = fresh_net(8)
    path = tmp_path / "n.ckpt"
    save_network(path, net)
    padded = tmp_path / "pad.ckpt"
    padded.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(padded)


def test_missing_tensor_rejected(tmp_path):
    net = fresh_net(9)
    state = net.named_state()
    del state["up2.skip.w"]
    path = tmp_path / "n.ckpt"
    save_checkpoint(path, state)
    with pytest.raises(CheckpointError):
        load_network(path)


def test_foreign_tensor_rejected(tmp_path):
    net = fresh_net(10)
    state = net.named_state()
    state["mystery"] = np.zeros(3, dtype=np.float32)
    path = tmp_path / "n.ckpt"
    save_checkpoint(path, state)
    with pytest.raises(CheckpointError):
        load_network(path)


def test_load_network_preserves_dilation_argument(tmp_path):
    net = fresh_net(11)
    path = tmp_path / "n.ckpt"
    save_network(path, net)
    assert load_network(path, dilation_rate=1).spec.dilation_rate == 1
    assert load_network(path).spec.dilation_rate == 4
