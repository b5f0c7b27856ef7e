"""CLI tests: exit codes, flag parsing, and the gen/train/eval/segment/
gradcheck round trip on a toy dataset."""

import hashlib
import json
import math
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from eddyseg import checkpoint, datapack, pgm
from eddyseg.cli import UsageError, main, parse_channels
from eddyseg.network import NetworkSpec, build_network
from oracles import pgm_pixel_counts_oracle

GEN_ARGS = ["--n-train", "6", "--n-test", "2", "--size", "16", "--seed", "5"]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("clidata")
    assert main(["gen", "--out", str(out)] + GEN_ARGS) == 0
    return out


@pytest.fixture(scope="module")
def trained_ckpt(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cliruns") / "model.eddyw"
    code = main(["train", "--data", str(dataset_dir), "--out", str(out),
                 "--epochs", "2", "--batch", "4", "--quiet"])
    assert code == 0
    return out


# -- parse_channels ----------------------------------------------------------

def test_parse_channels_forms():
    assert parse_channels("all") == ("ssh", "sst", "u", "v")
    assert parse_channels("uv") == ("u", "v")
    assert parse_channels("ssh,uv") == ("ssh", "u", "v")
    # canonical ordering regardless of input order
    assert parse_channels("v,ssh") == ("ssh", "v")
    assert parse_channels(" SST ") == ("sst",)


def test_parse_channels_errors():
    with pytest.raises(UsageError):
        parse_channels("depth")
    with pytest.raises(UsageError):
        parse_channels("")
    with pytest.raises(UsageError):
        parse_channels(",")


# -- exit codes --------------------------------------------------------------

def test_no_command_is_usage_error(capsys):
    assert main([]) == 2
    capsys.readouterr()


def test_unknown_command_is_usage_error(capsys):
    assert main(["frobnicate"]) == 2
    capsys.readouterr()


def test_gen_n_train_zero_exit_2(tmp_path, capsys):
    code = main(["gen", "--out", str(tmp_path / "d"), "--n-train", "0"])
    assert code == 2
    assert "n-train" in capsys.readouterr().err


@pytest.mark.parametrize("size", ["0", "17", "-16"])
def test_gen_bad_size_exit_2(tmp_path, size, capsys):
    code = main(["gen", "--out", str(tmp_path / "d"), "--size", size])
    assert code == 2
    capsys.readouterr()


def test_eval_missing_weights_exit_1(dataset_dir, capsys):
    code = main(["eval", "--data", str(dataset_dir),
                 "--weights", str(dataset_dir / "nope.eddyw")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


# -- gen ---------------------------------------------------------------------

def test_gen_writes_dataset(dataset_dir, capsys):
    eddy_files = sorted(p.name for p in dataset_dir.glob("*.eddy"))
    assert len(eddy_files) == 8
    assert sum(n.startswith("train_") for n in eddy_files) == 6
    assert sum(n.startswith("test_") for n in eddy_files) == 2
    manifest = datapack.Manifest.load(dataset_dir / "manifest.json")
    assert len(manifest.paths("train")) == 6
    assert len(manifest.paths("test")) == 2


def _dir_digest(path):
    digest = hashlib.sha256()
    for p in sorted(Path(path).iterdir()):
        digest.update(p.name.encode())
        digest.update(p.read_bytes())
    return digest.hexdigest()


def test_gen_same_seed_identical_digest(tmp_path, capsys):
    a, b, c = (tmp_path / n for n in "abc")
    assert main(["gen", "--out", str(a)] + GEN_ARGS) == 0
    assert main(["gen", "--out", str(b)] + GEN_ARGS) == 0
    assert main(["gen", "--out", str(c)] + GEN_ARGS[:-1] + ["6"]) == 0
    capsys.readouterr()
    assert _dir_digest(a) == _dir_digest(b)
    assert _dir_digest(a) != _dir_digest(c)


def test_gen_entry_point_subprocess(tmp_path):
    out = tmp_path / "sub"
    proc = subprocess.run(
        [sys.executable, "-m", "eddyseg.cli", "gen", "--out", str(out)]
        + GEN_ARGS, capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert (out / "manifest.json").exists()


# -- train -------------------------------------------------------------------

def test_train_writes_checkpoint_and_history(trained_ckpt):
    arrays = checkpoint.load_checkpoint(trained_ckpt)
    assert "norm.mean" in arrays and "norm.std" in arrays
    assert arrays["norm.mean"].shape == (1, 4, 1, 1)
    history = (trained_ckpt.parent / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,loss,ce,dice_loss,train_acc,val_acc,lr"
    assert len(history) == 3  # header + 2 epochs


def test_train_channels_ssh_single_input(dataset_dir, tmp_path, capsys):
    out = tmp_path / "ssh.eddyw"
    code = main(["train", "--data", str(dataset_dir), "--out", str(out),
                 "--epochs", "1", "--batch", "4", "--channels", "ssh",
                 "--quiet"])
    capsys.readouterr()
    assert code == 0
    arrays = checkpoint.load_checkpoint(out)
    assert arrays["down1.conv1.w"].shape[1] == 1
    assert arrays["norm.mean"].shape == (1, 1, 1, 1)


# -- eval --------------------------------------------------------------------

def test_eval_prints_identity_consistent_report(dataset_dir, trained_ckpt,
                                                capsys):
    code = main(["eval", "--data", str(dataset_dir),
                 "--weights", str(trained_ckpt), "--split", "test"])
    assert code == 0
    out = capsys.readouterr().out
    assert "pixel_accuracy" in out
    m = re.search(r"loss combined ([\d.]+) = ce ([\d.]+) "
                  r"- ln\(1 - dice_loss ([\d.]+)\)", out)
    assert m, out
    combined, ce, dl = (float(g) for g in m.groups())
    assert abs(combined - (ce - math.log(1.0 - dl))) < 5e-6
    assert "confusion (rows = truth):" in out


def test_eval_channel_mismatch_exit_2(dataset_dir, trained_ckpt, capsys):
    code = main(["eval", "--data", str(dataset_dir),
                 "--weights", str(trained_ckpt), "--channels", "ssh"])
    assert code == 2
    assert "channels" in capsys.readouterr().err


# -- segment -----------------------------------------------------------------

def test_segment_mask_matches_pixel_count_oracle(dataset_dir, trained_ckpt,
                                                 tmp_path, capsys):
    mask = tmp_path / "mask.pgm"
    code = main(["segment", "--input", str(dataset_dir / "train_0000.eddy"),
                 "--weights", str(trained_ckpt), "--out", str(mask)])
    capsys.readouterr()
    assert code == 0
    w, h, counts = pgm_pixel_counts_oracle(mask)
    assert (w, h) == (16, 16)
    assert set(counts) <= {0, 128, 255}
    sidecar = json.loads((tmp_path / "mask.json").read_text())
    assert sidecar["background"] == counts.get(128, 0)
    assert sidecar["anticyclonic"] == counts.get(255, 0)
    assert sidecar["cyclonic"] == counts.get(0, 0)
    assert sum(sidecar.values()) == 256


def test_segment_untrained_net_is_uniform_background(dataset_dir, tmp_path,
                                                     capsys):
    net = build_network(NetworkSpec(), np.random.default_rng(0))
    ckpt = tmp_path / "blank.eddyw"
    checkpoint.save_network(ckpt, net)
    mask = tmp_path / "blank.pgm"
    code = main(["segment", "--input", str(dataset_dir / "train_0001.eddy"),
                 "--weights", str(ckpt), "--out", str(mask)])
    capsys.readouterr()
    assert code == 0
    image = pgm.read_pgm(mask)
    assert image.shape == (16, 16)
    assert np.all(image == pgm.GRAY_BACKGROUND)


def test_segment_non_mod16_input_exit_2(trained_ckpt, tmp_path, capsys):
    sample = datapack.Sample(channels=np.zeros((4, 15, 16), dtype=np.float32),
                             labels=np.zeros((15, 16), dtype=np.int8))
    bad = tmp_path / "bad.eddy"
    datapack.write_sample(bad, sample)
    code = main(["segment", "--input", str(bad),
                 "--weights", str(trained_ckpt),
                 "--out", str(tmp_path / "bad.pgm")])
    assert code == 2
    assert "divisible by 16" in capsys.readouterr().err


# -- gradcheck ---------------------------------------------------------------

def test_gradcheck_cli_passes(capsys):
    assert main(["gradcheck", "--instances", "1"]) == 0
    out = capsys.readouterr().out
    assert "max rel err" in out
    assert "all passed" in out
    assert "FAIL" not in out


def test_gradcheck_cli_injected_fault_exit_1(capsys):
    assert main(["gradcheck", "--instances", "1",
                 "--inject-bad-backward"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "injected_bad_backward" in out
