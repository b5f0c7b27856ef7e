"""Synthetic labeled eddy fields.

Sea-surface height is a sum of signed Gaussian bumps; SST couples to it on
top of a meridional background gradient, and the velocity channels follow
from the geostrophic balance U = -c d(eta)/dy, V = +c d(eta)/dx. With that
handedness an anticyclone (polarity +1, a positive SSH bump) rotates
clockwise: its discrete counterclockwise circulation along any closed
contour is negative, and positive for a cyclone.

Labels mark the disk d <= R of each eddy with its polarity; overlapping
disks resolve to the nearest center.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from eddyseg import datapack
from eddyseg.datapack import Manifest, Sample

GEN_ATTEMPTS = 1000


@dataclass(frozen=True)
class EddyParams:
    cx: float
    cy: float
    radius: float
    polarity: int
    amplitude: float

    def __post_init__(self):
        if self.radius < 3:
            raise ValueError("eddy radius must be >= 3 cells")
        if self.polarity not in (1, -1):
            raise ValueError("polarity must be +1 or -1")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")


@dataclass(frozen=True)
class FieldConfig:
    height: int = 64
    width: int = 64
    eddy_count: tuple = None  # None: (1, 5) scaled by grid area / 64^2
    radius_range: tuple = (6.0, 16.0)
    amplitude_range: tuple = (0.1, 0.5)
    sst_alpha: float = 2.0       # deg C per meter of SSH anomaly
    sst_gradient: float = 0.01   # deg C per row, meridional background
    sst_base: float = 15.0
    noise_frac: float = 0.02     # noise std as a fraction of clean-signal std
    geostrophic_c: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 3 or self.width < 3:
            raise ValueError("grid must be at least 3x3")
        for name in ("radius_range", "amplitude_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi")
        if self.radius_range[0] < 3:
            raise ValueError("radius range must start at >= 3 cells")
        if self.noise_frac < 0:
            raise ValueError("noise fraction must be >= 0")
        if self.eddy_count is not None:
            lo, hi = self.eddy_count
            if not 0 <= lo <= hi:
                raise ValueError("eddy count range must satisfy 0 <= lo <= hi")

    def count_range(self):
        """Eddy count range; the default scales with grid area so coverage
        stays roughly size-independent ((1, 5) on a 64x64 grid)."""
        if self.eddy_count is not None:
            return tuple(int(c) for c in self.eddy_count)
        scale = (self.height * self.width) / 4096.0
        lo = max(1, round(1 * scale))
        return (lo, max(lo, round(5 * scale)))


def draw_eddies(cfg, rng):
    """Sample eddy parameters; centers are uniform over the grid."""
    lo, hi = cfg.count_range()
    count = int(rng.integers(lo, hi + 1))
    eddies = []
    for _ in range(count):
        cx = float(rng.uniform(0, cfg.width - 1))
        cy = float(rng.uniform(0, cfg.height - 1))
        radius = float(rng.uniform(*cfg.radius_range))
        amplitude = float(rng.uniform(*cfg.amplitude_range))
        polarity = 1 if rng.random() < 0.5 else -1
        eddies.append(EddyParams(cx=cx, cy=cy, radius=radius,
                                 polarity=polarity, amplitude=amplitude))
    return eddies


def ssh_field(cfg, eddies):
    """Noiseless SSH: sum of signed Gaussian bumps, float64."""
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    eta = np.zeros((cfg.height, cfg.width), dtype=np.float64)
    for e in eddies:
        d2 = (xx - e.cx)**2 + (yy - e.cy)**2
        eta += e.polarity * e.amplitude * np.exp(-d2 / (2.0 * e.radius**2))
    return eta


def label_grid(cfg, eddies):
    """Polarity of the nearest eddy whose disk d <= R covers the pixel."""
    labels = np.zeros((cfg.height, cfg.width), dtype=np.int8)
    if not eddies:
        return labels
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    dist = np.stack([np.hypot(xx - e.cx, yy - e.cy) for e in eddies])
    radii = np.array([e.radius for e in eddies]).reshape(-1, 1, 1)
    inside = dist <= radii
    masked = np.where(inside, dist, np.inf)
    nearest = masked.argmin(axis=0)
    polarity = np.array([e.polarity for e in eddies], dtype=np.int8)
    covered = inside.any(axis=0)
    labels[covered] = polarity[nearest[covered]]
    return labels


def geostrophic_velocity(eta, c):
    """U = -c d(eta)/dy, V = +c d(eta)/dx by central differences
    (one-sided at the borders)."""
    eta = np.asarray(eta, dtype=np.float64)
    if eta.ndim != 2 or min(eta.shape) < 3:
        raise ValueError("eta must be a 2-D grid of at least 3x3")
    deta_dy, deta_dx = np.gradient(eta)
    return -c * deta_dy, c * deta_dx


def render_field(cfg, eddies, rng=None):
    """Assemble a Sample from explicit eddies.

    Velocities derive from the noiseless SSH; per-channel Gaussian noise
    (std = noise_frac * clean channel std) is added afterwards when an rng
    is given. Noise draws follow the fixed channel order ssh, sst, u, v.
    """
    eta = ssh_field(cfg, eddies)
    yy = np.arange(cfg.height, dtype=np.float64).reshape(-1, 1)
    sst = cfg.sst_base + cfg.sst_gradient * yy + cfg.sst_alpha * eta
    u, v = geostrophic_velocity(eta, cfg.geostrophic_c)
    channels = np.stack([eta, sst, u, v])
    if rng is not None and cfg.noise_frac > 0:
        for k in range(4):
            std = float(channels[k].std())
            channels[k] += rng.normal(0.0, 1.0, channels[k].shape) * (cfg.noise_frac * std)
    return Sample(channels=channels.astype(np.float32),
                  labels=label_grid(cfg, eddies))


def gen_field(cfg, rng):
    """Draw eddies and render one noisy sample from ``rng``."""
    return render_field(cfg, draw_eddies(cfg, rng), rng)


def sample_stream(seed, index):
    """Independent per-sample generator stream (stream id = sample index)."""
    return np.random.default_rng([seed, index])


def gen_dataset(cfg, n_train, n_test, out_dir, seed=None):
    """Generate disjoint train/test splits of accepted samples.

    Each sample draws from its own seeded stream and is regenerated (from
    that same stream) until its eddy fraction reaches datapack's 20 % floor,
    within 1000 attempts. Files are written raw; the manifest holds
    train-set channel stats and the seed. Returns the Manifest.
    """
    if n_train < 1 or n_test < 0:
        raise ValueError("need n_train >= 1 and n_test >= 0")
    seed = cfg.seed if seed is None else int(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    train_samples = []
    for index in range(n_train + n_test):
        rng = sample_stream(seed, index)
        for attempt in range(GEN_ATTEMPTS):
            sample = gen_field(cfg, rng)
            if datapack.eddy_fraction(sample.labels) >= 0.20:
                break
        else:
            raise RuntimeError(
                f"sample {index}: no field reached 20% eddy fraction in "
                f"{GEN_ATTEMPTS} attempts; widen the eddy count or radius range")
        if index < n_train:
            split, pos = "train", index
            train_samples.append(sample)
        else:
            split, pos = "test", index - n_train
        name = f"{split}_{pos:04d}.eddy"
        datapack.write_sample(out_dir / name, sample)
        entries.append((name, split))
    manifest = Manifest(samples=entries,
                        stats=datapack.compute_stats(train_samples),
                        seed=seed)
    manifest.save(out_dir / "manifest.json")
    return manifest
