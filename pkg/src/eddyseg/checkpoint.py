"""Binary checkpoint format for network weights.

Layout (little-endian): magic ``EDYW``, u16 version (currently 1), u32
tensor count, then per tensor a u32 name length, the UTF-8 name, u8 ndim,
ndim u32 dims, and the float32 payload in row-major order. Tensors are
written in network enumeration order: parameters first, then batchnorm
running means/variances.
"""

import struct

import numpy as np

from eddyseg.network import NetworkSpec, build_network

MAGIC = b"EDYW"
VERSION = 1
# extra tensors a checkpoint may carry beyond the architecture state
OPTIONAL_KEYS = ("norm.mean", "norm.std")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named_arrays):
    """Write a name -> array mapping; payloads are stored as float32."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(named_arrays)))
        for name, arr in named_arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Read a checkpoint back into an ordered name -> float32 array dict."""
    out = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        version, count = struct.unpack("<HI", _read_exact(fh, 6, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for k in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            n_el = int(np.prod(dims)) if ndim else 1
            payload = _read_exact(fh, 4 * n_el, f"payload of {name!r}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
            out[name] = arr.astype(np.float32)
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor")
    return out


def save_network(path, net):
    """Serialize parameters plus batchnorm running statistics."""
    save_checkpoint(path, net.named_state())


def load_network(path, dilation_rate=4, dtype=np.float32):
    """Rebuild a Network from a checkpoint.

    Channel counts are recovered from the stored dims; the dilation rate is
    not stored (it changes no parameter shapes) and must be supplied.
    """
    arrays = load_checkpoint(path)
    for key in OPTIONAL_KEYS:
        arrays.pop(key, None)
    for key in ("down1.conv1.w", "head.w"):
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
    first = arrays["down1.conv1.w"]
    spec = NetworkSpec(in_channels=int(first.shape[1]),
                       classes=int(arrays["head.w"].shape[0]),
                       base_channels=int(first.shape[0]),
                       dilation_rate=dilation_rate)
    net = build_network(spec, np.random.default_rng(0), dtype=dtype)
    expected = net.named_state()
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(
            f"checkpoint does not match the architecture "
            f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, arr in arrays.items():
        if expected[name].shape != arr.shape:
            raise CheckpointError(f"dims mismatch for {name!r}: "
                                  f"{arr.shape} vs {expected[name].shape}")
    for name, t in net.params.items():
        t.data = arrays[name].astype(net.dtype)
    for key, bn in net.bn_states.items():
        bn.running_mean = arrays[f"{key}.running_mean"].astype(net.dtype)
        bn.running_var = arrays[f"{key}.running_var"].astype(net.dtype)
    return net
