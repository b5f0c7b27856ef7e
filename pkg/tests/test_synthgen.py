"""Synthetic field generator: physics, labels, determinism, dataset layout."""

import math

import numpy as np
import pytest

from eddyseg.datapack import Manifest, eddy_fraction, read_sample
from eddyseg.synthgen import (
    EddyParams,
    FieldConfig,
    draw_eddies,
    gen_dataset,
    gen_field,
    geostrophic_velocity,
    label_grid,
    render_field,
    sample_stream,
    ssh_field,
)

import oracles


def eddy(cx, cy, radius=6.0, polarity=1, amplitude=0.3):
    return EddyParams(cx=cx, cy=cy, radius=radius, polarity=polarity,
                      amplitude=amplitude)


def rows_of(eddies):
    """EddyParams -> the plain (cx, cy, r, polarity, amplitude) rows the
    oracles consume."""
    return [(e.cx, e.cy, e.radius, e.polarity, e.amplitude) for e in eddies]


# ---------------------------------------------------------------------------
# parameter validation
# ---------------------------------------------------------------------------


def test_eddy_params_validation():
    with pytest.raises(ValueError):
        eddy(0, 0, radius=2.0)
    with pytest.raises(ValueError):
        EddyParams(cx=0, cy=0, radius=6, polarity=0, amplitude=0.3)
    with pytest.raises(ValueError):
        eddy(0, 0, amplitude=0.0)


def test_field_config_validation():
    with pytest.raises(ValueError):
        FieldConfig(height=2)
    with pytest.raises(ValueError):
        FieldConfig(radius_range=(2.0, 16.0))
    with pytest.raises(ValueError):
        FieldConfig(amplitude_range=(0.5, 0.1))
    with pytest.raises(ValueError):
        FieldConfig(noise_frac=-0.1)
    with pytest.raises(ValueError):
        FieldConfig(eddy_count=(3, 1))


def test_count_range_scales_with_area():
    assert FieldConfig().count_range() == (1, 5)
    assert FieldConfig(height=128, width=128).count_range() == (4, 20)
    assert FieldConfig(eddy_count=(2, 3)).count_range() == (2, 3)
    # tiny grids still ask for at least one eddy
    assert FieldConfig(height=16, width=16).count_range() == (1, 1)


# ---------------------------------------------------------------------------
# SSH, labels, velocities
# ---------------------------------------------------------------------------


def test_ssh_zero_eddies_is_flat():
    cfg = FieldConfig()
    assert np.array_equal(ssh_field(cfg, []), np.zeros((64, 64)))


def test_ssh_single_eddy_matches_gaussian_oracle():
    cfg = FieldConfig(height=32, width=32)
    eddies = [eddy(15.0, 10.0, radius=6.0, polarity=1, amplitude=0.4)]
    eta = ssh_field(cfg, eddies)
    ref = oracles.gaussian_eta_oracle(32, 32, rows_of(eddies))
    assert np.allclose(eta, ref, atol=1e-12)
    # peak sits at the center and equals the amplitude
    assert eta[10, 15] == pytest.approx(0.4, abs=1e-12)
    assert eta.max() == pytest.approx(0.4, abs=1e-12)


def test_ssh_superposition_and_sign():
    cfg = FieldConfig(height=48, width=48)
    up = eddy(12.0, 24.0, polarity=1, amplitude=0.2)
    down = eddy(36.0, 24.0, polarity=-1, amplitude=0.2)
    eta = ssh_field(cfg, [up, down])
    both = ssh_field(cfg, [up]) + ssh_field(cfg, [down])
    assert np.allclose(eta, both, atol=1e-12)
    assert eta[24, 12] > 0 > eta[24, 36]


def test_label_disk_matches_oracle():
    cfg = FieldConfig(height=32, width=32)
    e = eddy(20.0, 14.0, radius=5.0, polarity=-1)
    labels = label_grid(cfg, [e])
    ref = oracles.disk_label_oracle(32, 32, 20.0, 14.0, 5.0, -1)
    assert np.array_equal(labels, ref)


def test_overlapping_disks_resolve_to_nearest_center():
    cfg = FieldConfig(height=32, width=32)
    a = eddy(12.0, 16.0, radius=8.0, polarity=1)
    b = eddy(20.0, 16.0, radius=8.0, polarity=-1)
    labels = label_grid(cfg, [a, b])
    assert labels[16, 12] == 1 and labels[16, 20] == -1
    # midpoint column 16 is equidistant; nearer pixels on each side win
    assert labels[16, 14] == 1 and labels[16, 18] == -1


def test_geostrophic_matches_analytic_gradient():
    cfg = FieldConfig(height=40, width=40)
    eddies = [eddy(20.0, 20.0, radius=7.0, polarity=1, amplitude=0.3)]
    eta = ssh_field(cfg, eddies)
    u, v = geostrophic_velocity(eta, cfg.geostrophic_c)
    detadx = oracles.gaussian_detadx_oracle(40, 40, rows_of(eddies))
    detady = oracles.gaussian_detady_oracle(40, 40, rows_of(eddies))
    # central differences on an R=7 Gaussian carry O(h^2) truncation error
    # of about 0.8% of the velocity scale; 6e-3 absolute covers it
    interior = (slice(2, -2), slice(2, -2))
    assert np.allclose(u[interior], -cfg.geostrophic_c * detady[interior], atol=6e-3)
    assert np.allclose(v[interior], cfg.geostrophic_c * detadx[interior], atol=6e-3)


def test_anticyclone_circulation_is_negative():
    # counterclockwise line integral of (U, V) on a square contour around an
    # anticyclone must be negative (clockwise rotation), positive for a cyclone
    cfg = FieldConfig(height=48, width=48)
    for polarity, sign in [(1, -1), (-1, 1)]:
        eta = ssh_field(cfg, [eddy(24.0, 24.0, radius=6.0,
                                   polarity=polarity, amplitude=0.4)])
        u, v = geostrophic_velocity(eta, cfg.geostrophic_c)
        r = 6
        c = 24
        top, bottom, left, right = c - r, c + r, c - r, c + r
        circ = (u[top, left:right].sum() + v[top:bottom, right].sum()
                - u[bottom, left:right].sum() - v[top:bottom, left].sum())
        assert sign * circ > 0, f"polarity {polarity}"


def test_velocity_antisymmetry_under_polarity_flip():
    cfg = FieldConfig(height=32, width=32)
    plus = ssh_field(cfg, [eddy(16.0, 16.0, polarity=1)])
    minus = ssh_field(cfg, [eddy(16.0, 16.0, polarity=-1)])
    up, vp = geostrophic_velocity(plus, cfg.geostrophic_c)
    um, vm = geostrophic_velocity(minus, cfg.geostrophic_c)
    assert np.allclose(up, -um, atol=1e-5)
    assert np.allclose(vp, -vm, atol=1e-5)


def test_planar_ramp_gives_constant_velocity():
    # eta = x slope: d/dx = 1, d/dy = 0 -> V = c, U = 0 everywhere
    eta = np.tile(np.arange(8, dtype=np.float64), (8, 1))
    u, v = geostrophic_velocity(eta, 20.0)
    assert np.allclose(u, 0.0, atol=1e-12)
    assert np.allclose(v, 20.0, atol=1e-12)


def test_geostrophic_validates_grid():
    with pytest.raises(ValueError):
        geostrophic_velocity(np.zeros((2, 5)), 1.0)
    with pytest.raises(ValueError):
        geostrophic_velocity(np.zeros(5), 1.0)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def test_render_field_channel_order_and_clean_channels():
    cfg = FieldConfig(height=32, width=32)
    eddies = [eddy(16.0, 16.0, radius=6.0, polarity=1, amplitude=0.3)]
    s = render_field(cfg, eddies)  # no rng: noiseless
    assert s.channels.shape == (4, 32, 32)
    eta = ssh_field(cfg, eddies)
    yy = np.arange(32, dtype=np.float64).reshape(-1, 1)
    sst = cfg.sst_base + cfg.sst_gradient * yy + cfg.sst_alpha * eta
    assert np.allclose(s.channels[0], eta, atol=1e-6)
    assert np.allclose(s.channels[1], sst, atol=1e-5)
    u, v = geostrophic_velocity(eta, cfg.geostrophic_c)
    assert np.allclose(s.channels[2], u, atol=1e-5)
    assert np.allclose(s.channels[3], v, atol=1e-5)


def test_render_noise_scale():
    cfg = FieldConfig(height=64, width=64, noise_frac=0.02)
    eddies = [eddy(32.0, 32.0, radius=10.0, polarity=1, amplitude=0.4)]
    clean = render_field(cfg, eddies).channels.astype(np.float64)
    noisy = render_field(cfg, eddies, np.random.default_rng(0)).channels.astype(np.float64)
    for k in range(4):
        resid = noisy[k] - clean[k]
        target = 0.02 * clean[k].std()
        assert 0.5 * target < resid.std() < 1.5 * target


def test_draw_eddies_respects_config_ranges():
    cfg = FieldConfig(height=64, width=64, eddy_count=(3, 3))
    rng = np.random.default_rng(1)
    for _ in range(20):
        eddies = draw_eddies(cfg, rng)
        assert len(eddies) == 3
        for e in eddies:
            assert 0 <= e.cx <= 63 and 0 <= e.cy <= 63
            assert 6.0 <= e.radius <= 16.0
            assert 0.1 <= e.amplitude <= 0.5
            assert e.polarity in (1, -1)


def test_gen_field_deterministic_per_stream():
    cfg = FieldConfig()
    a = gen_field(cfg, sample_stream(7, 3))
    b = gen_field(cfg, sample_stream(7, 3))
    assert np.array_equal(a.channels, b.channels)
    assert np.array_equal(a.labels, b.labels)
    c = gen_field(cfg, sample_stream(7, 4))
    assert not np.array_equal(a.channels, c.channels)


def test_polarity_classes_balance_over_many_fields():
    cfg = FieldConfig()
    pos = neg = 0
    for i in range(100):
        s = gen_field(cfg, sample_stream(0, i))
        pos += int((s.labels == 1).sum())
        neg += int((s.labels == -1).sum())
    ratio = pos / (pos + neg)
    assert 0.35 < ratio < 0.65


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def test_gen_dataset_layout_and_floor(tmp_path):
    cfg = FieldConfig(height=32, width=32)
    man = gen_dataset(cfg, n_train=4, n_test=2, out_dir=tmp_path, seed=5)
    files = sorted(p.name for p in tmp_path.glob("*.eddy"))
    assert files == ["test_0000.eddy", "test_0001.eddy",
                     "train_0000.eddy", "train_0001.eddy",
                     "train_0002.eddy", "train_0003.eddy"]
    assert (tmp_path / "manifest.json").exists()
    assert man.seed == 5
    assert len(man.paths("train")) == 4 and len(man.paths("test")) == 2
    for name in files:
        s = read_sample(tmp_path / name)
        assert eddy_fraction(s.labels) >= 0.20


def test_gen_dataset_deterministic_bytes(tmp_path):
    cfg = FieldConfig(height=32, width=32)
    d1, d2 = tmp_path / "a", tmp_path / "b"
    gen_dataset(cfg, 3, 1, d1, seed=42)
    gen_dataset(cfg, 3, 1, d2, seed=42)
    for p1 in sorted(d1.iterdir()):
        assert p1.read_bytes() == (d2 / p1.name).read_bytes(), p1.name


def test_gen_dataset_stats_come_from_train_split(tmp_path):
    cfg = FieldConfig(height=32, width=32)
    man = gen_dataset(cfg, 3, 2, tmp_path, seed=9)
    train = [read_sample(tmp_path / p) for p in man.paths("train")]
    flat = np.concatenate([s.channels.reshape(4, -1) for s in train],
                          axis=1).astype(np.float64)
    assert np.allclose(man.stats.mean, flat.mean(axis=1), atol=1e-9)
    assert np.allclose(man.stats.std, flat.std(axis=1), atol=1e-9)


def test_gen_dataset_validates_counts(tmp_path):
    with pytest.raises(ValueError):
        gen_dataset(FieldConfig(), 0, 1, tmp_path)
