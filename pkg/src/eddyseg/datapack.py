"""Sample container, binary .eddy format, patch extraction and statistics.

A ``Sample`` holds float32 channels (channel, h, w) in the fixed order ssh,
sst, u, v plus an int8 label grid (h, w) with values -1 (cyclonic), 0
(background), +1 (anticyclonic).

On disk (little-endian): magic ``EDY1``, u32 height, u32 width, u32 channel
count, the float32 channel payloads in order, then the int8 labels. A
four-channel 128x128 sample is exactly 16 + 4*4*128*128 + 128*128 =
278544 bytes.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"EDY1"
CHANNEL_NAMES = ("ssh", "sst", "u", "v")
VALID_LABELS = (-1, 0, 1)


class FormatError(ValueError):
    pass


@dataclass
class Sample:
    channels: np.ndarray  # (nchan, h, w) float32
    labels: np.ndarray    # (h, w) int8

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.channels.ndim != 3:
            raise ValueError("channels must be (nchan, h, w)")
        if self.labels.shape != self.channels.shape[1:]:
            raise ValueError("labels grid must match channel spatial dims")
        if not np.isin(self.labels, VALID_LABELS).all():
            raise ValueError("labels must be -1, 0 or +1")
        if not np.isfinite(self.channels).all():
            raise ValueError("channels must be finite")

    @property
    def nchan(self):
        return self.channels.shape[0]

    @property
    def height(self):
        return self.channels.shape[1]

    @property
    def width(self):
        return self.channels.shape[2]


def eddy_fraction(labels):
    """Fraction of pixels carrying a non-background label."""
    labels = np.asarray(labels)
    return float(np.count_nonzero(labels) / labels.size)


def write_sample(path, sample):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", sample.height, sample.width, sample.nchan))
        fh.write(np.ascontiguousarray(sample.channels, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.labels, dtype=np.int8).tobytes())


def read_sample(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != MAGIC:
            raise FormatError(f"{path}: not an .eddy file (bad magic)")
        h, w, nchan = struct.unpack("<III", head[4:])
        if not (h and w and nchan):
            raise FormatError(f"{path}: zero dims in header")
        chan_bytes = 4 * nchan * h * w
        payload = fh.read(chan_bytes + h * w)
        if len(payload) != chan_bytes + h * w:
            raise FormatError(f"{path}: truncated payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    channels = np.frombuffer(payload[:chan_bytes], dtype="<f4").reshape(nchan, h, w)
    labels = np.frombuffer(payload[chan_bytes:], dtype=np.int8).reshape(h, w)
    if not np.isin(labels, VALID_LABELS).all():
        raise FormatError(f"{path}: label byte outside {{-1, 0, 1}}")
    return Sample(channels=channels.copy(), labels=labels.copy())


def extract_patches(sample, size, count, rng, min_eddy_fraction=0.20):
    """Draw ``count`` random patches whose eddy fraction meets the floor.

    Corners are drawn uniformly; duplicate corners are rejected alongside
    under-filled patches, all within a 1000 * count draw budget.
    """
    h, w = sample.height, sample.width
    if size > h or size > w:
        raise ValueError("patch size exceeds the source grid")
    patches = []
    corners = set()
    budget = 1000 * count
    for _ in range(budget):
        if len(patches) == count:
            break
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        if (top, left) in corners:
            continue
        labels = sample.labels[top:top + size, left:left + size]
        if eddy_fraction(labels) < min_eddy_fraction:
            continue
        corners.add((top, left))
        patches.append(Sample(
            channels=sample.channels[:, top:top + size, left:left + size].copy(),
            labels=labels.copy()))
    if len(patches) < count:
        raise RuntimeError(
            f"patch budget exhausted: {len(patches)}/{count} patches with "
            f"eddy fraction >= {min_eddy_fraction}")
    return patches


@dataclass
class ChannelStats:
    mean: tuple
    std: tuple

    def __post_init__(self):
        self.mean = tuple(float(m) for m in self.mean)
        self.std = tuple(max(float(s), 1e-8) for s in self.std)
        if len(self.mean) != len(self.std):
            raise ValueError("mean/std length mismatch")


def compute_stats(samples):
    """Per-channel mean and population std over every pixel of ``samples``."""
    if not samples:
        raise ValueError("need at least one sample")
    nchan = samples[0].nchan
    total = np.zeros(nchan, dtype=np.float64)
    total_sq = np.zeros(nchan, dtype=np.float64)
    count = 0
    for s in samples:
        if s.nchan != nchan:
            raise ValueError("samples disagree on channel count")
        flat = s.channels.reshape(nchan, -1).astype(np.float64)
        total += flat.sum(axis=1)
        total_sq += (flat**2).sum(axis=1)
        count += flat.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    return ChannelStats(mean=tuple(mean), std=tuple(np.sqrt(var)))


def normalize(sample, stats):
    """(x - mean) / std per channel; labels pass through untouched."""
    mean = np.asarray(stats.mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(stats.std, dtype=np.float32).reshape(-1, 1, 1)
    if mean.shape[0] != sample.nchan:
        raise ValueError("stats channel count does not match sample")
    return Sample(channels=(sample.channels - mean) / std,
                  labels=sample.labels.copy())


def denormalize(sample, stats):
    mean = np.asarray(stats.mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(stats.std, dtype=np.float32).reshape(-1, 1, 1)
    if mean.shape[0] != sample.nchan:
        raise ValueError("stats channel count does not match sample")
    return Sample(channels=sample.channels * std + mean,
                  labels=sample.labels.copy())


@dataclass
class Manifest:
    """Index of a generated dataset: file names, split tags, train-set
    channel statistics and the generator seed."""

    samples: list = field(default_factory=list)  # (relative path, split)
    stats: ChannelStats = None
    seed: int = 0

    def __post_init__(self):
        paths = [p for p, _ in self.samples]
        if len(set(paths)) != len(paths):
            raise ValueError("duplicate sample paths in manifest")
        for _, split in self.samples:
            if split not in ("train", "test"):
                raise ValueError(f"unknown split {split!r}")

    def paths(self, split):
        return [p for p, s in self.samples if s == split]

    def save(self, path):
        doc = {"samples": [[p, s] for p, s in self.samples],
               "splits": {"train": len(self.paths("train")),
                          "test": len(self.paths("test"))},
               "stats": {"mean": list(self.stats.mean),
                         "std": list(self.stats.std)},
               "seed": self.seed}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        try:
            stats = ChannelStats(mean=doc["stats"]["mean"], std=doc["stats"]["std"])
            manifest = cls(samples=[(p, s) for p, s in doc["samples"]],
                           stats=stats, seed=int(doc["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: invalid manifest ({exc})") from exc
        return manifest
