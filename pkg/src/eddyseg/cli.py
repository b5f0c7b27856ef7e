"""Command-line entry point.

Subcommands: gen (synthetic dataset), train, eval, segment (PGM mask),
gradcheck. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from eddyseg import (checkpoint, datapack, gradcheck as gradcheck_mod,
                     losses, pgm, synthgen, trainer)
from eddyseg.autodiff import Tensor4
from eddyseg.datapack import CHANNEL_NAMES


class UsageError(ValueError):
    pass


def parse_channels(text):
    """Comma-separated channel selector; "uv" expands to u,v and "all" to
    every channel. Order follows the canonical ssh,sst,u,v order."""
    chosen = []
    for token in text.split(","):
        token = token.strip().lower()
        if not token:
            continue
        if token == "all":
            chosen.extend(CHANNEL_NAMES)
        elif token == "uv":
            chosen.extend(("u", "v"))
        elif token in CHANNEL_NAMES:
            chosen.append(token)
        else:
            raise UsageError(f"unknown channel {token!r} "
                             f"(choose from {', '.join(CHANNEL_NAMES)}, uv, all)")
    ordered = tuple(name for name in CHANNEL_NAMES if name in chosen)
    if not ordered:
        raise UsageError("channel selection is empty")
    return ordered


def _pair(text, what, cast=float):
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"{what} must be LO,HI")
    return (cast(parts[0]), cast(parts[1]))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="eddyseg",
        description="Mesoscale eddy segmentation: synthetic data, training, "
                    "inference and gradient checking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=256)
    p.add_argument("--size", type=int, default=64, help="square grid size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eddies", default=None,
                   help="eddy count range LO,HI (default scales with area)")
    p.add_argument("--radius", default="6,16", help="eddy radius range LO,HI")
    p.add_argument("--amplitude", default="0.1,0.5", help="SSH amplitude range LO,HI")
    p.add_argument("--alpha", type=float, default=2.0, help="SST/SSH coupling")
    p.add_argument("--noise", type=float, default=0.02,
                   help="noise std as fraction of signal std")
    p.add_argument("--geo-c", type=float, default=20.0, help="geostrophic constant")

    p = sub.add_parser("train", help="train a network on a generated dataset")
    p.add_argument("--data", required=True, help="path to manifest.json")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--loss", default="combined", choices=("combined", "ce", "dice"))
    p.add_argument("--channels", default="all",
                   help="comma list from ssh,sst,u,v,uv,all")
    p.add_argument("--dilation", default="on", choices=("on", "off"))
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history", default=None,
                   help="history.csv path (default: next to the checkpoint)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True, help="path to manifest.json")
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--channels", default="all")
    p.add_argument("--dilation", default="on", choices=("on", "off"))
    p.add_argument("--batch", type=int, default=8)

    p = sub.add_parser("segment", help="write a PGM mask for one sample")
    p.add_argument("--input", required=True, help=".eddy sample")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="mask .pgm path")
    p.add_argument("--channels", default="all")
    p.add_argument("--dilation", default="on", choices=("on", "off"))

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--inject-bad-backward", action="store_true",
                   help=argparse.SUPPRESS)
    return parser


def cmd_gen(args):
    if args.n_train < 1:
        raise UsageError("--n-train must be >= 1")
    if args.n_test < 0:
        raise UsageError("--n-test must be >= 0")
    if args.size < 16 or args.size % 16:
        raise UsageError("--size must be a positive multiple of 16")
    eddies = _pair(args.eddies, "--eddies", cast=int) if args.eddies else None
    cfg = synthgen.FieldConfig(height=args.size, width=args.size,
                               eddy_count=eddies,
                               radius_range=_pair(args.radius, "--radius"),
                               amplitude_range=_pair(args.amplitude, "--amplitude"),
                               sst_alpha=args.alpha, noise_frac=args.noise,
                               geostrophic_c=args.geo_c, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = synthgen.gen_dataset(cfg, args.n_train, args.n_test, out)
    print(f"wrote {len(manifest.samples)} samples "
          f"({args.n_train} train / {args.n_test} test) to {out}")
    return 0


def _load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return datapack.Manifest.load(path), path.parent


def _train_config(args):
    return trainer.TrainConfig(lr0=args.lr, epochs=args.epochs, batch=args.batch,
                               loss=args.loss, seed=args.seed,
                               channels=parse_channels(args.channels),
                               dilation=args.dilation == "on")


def cmd_train(args):
    manifest, data_dir = _load_manifest(args.data)
    cfg = _train_config(args)

    def progress(row):
        if not args.quiet:
            print(f"epoch {row.epoch:3d}  loss {row.loss:.4f}  ce {row.ce:.4f}  "
                  f"dice {row.dice_loss:.4f}  train_acc {row.train_acc:.4f}  "
                  f"val_acc {row.val_acc:.4f}  lr {row.lr:.1e}")

    net, state = trainer.train_from_manifest(cfg, manifest, data_dir,
                                             progress=progress)
    state_arrays = net.named_state()
    idx = trainer.channel_indices(cfg.channels)
    state_arrays["norm.mean"] = np.asarray(manifest.stats.mean,
                                           dtype=np.float32)[idx].reshape(1, -1, 1, 1)
    state_arrays["norm.std"] = np.asarray(manifest.stats.std,
                                          dtype=np.float32)[idx].reshape(1, -1, 1, 1)
    checkpoint.save_checkpoint(args.out, state_arrays)
    history_path = args.history or str(Path(args.out).with_name("history.csv"))
    trainer.history_to_csv(state.history, history_path)
    best = max(state.history, key=lambda r: r.val_acc)
    print(f"saved checkpoint to {args.out} and history to {history_path} "
          f"(best val_acc {best.val_acc:.4f})")
    return 0


def _load_net(args):
    arrays = checkpoint.load_checkpoint(args.weights)
    norm = (arrays.get("norm.mean"), arrays.get("norm.std"))
    rate = 4 if args.dilation == "on" else 1
    return checkpoint.load_network(args.weights, dilation_rate=rate), norm


def cmd_eval(args):
    manifest, data_dir = _load_manifest(args.data)
    channels = parse_channels(args.channels)
    net, _ = _load_net(args)
    if net.spec.in_channels != len(channels):
        raise UsageError(f"checkpoint expects {net.spec.in_channels} channels "
                         f"but --channels selects {len(channels)}")
    x, y = trainer.load_split(manifest, data_dir, args.split, channels)
    metrics, report, _ = trainer.evaluate(net, x, y, batch=args.batch)
    print(f"split {args.split}: {x.shape[0]} samples")
    print(f"pixel_accuracy {metrics.pixel_accuracy:.4f}")
    print(f"loss combined {report.combined:.6f} = ce {report.ce:.6f} "
          f"- ln(1 - dice_loss {report.dice_loss:.6f})")
    for c, name in enumerate(losses.CLASS_NAMES):
        print(f"{name:>13}: precision {metrics.precision[c]:.4f}  "
              f"recall {metrics.recall[c]:.4f}  "
              f"dice {report.per_class_dice[c]:.4f}")
    print("confusion (rows = truth):")
    for c, name in enumerate(losses.CLASS_NAMES):
        cells = "  ".join(f"{v:>10d}" for v in metrics.confusion[c])
        print(f"{name:>13}  {cells}")
    return 0


def cmd_segment(args):
    sample = datapack.read_sample(args.input)
    if sample.height % 16 or sample.width % 16:
        raise UsageError("input spatial dims must be divisible by 16")
    channels = parse_channels(args.channels)
    net, (mean, std) = _load_net(args)
    if net.spec.in_channels != len(channels):
        raise UsageError(f"checkpoint expects {net.spec.in_channels} channels "
                         f"but --channels selects {len(channels)}")
    idx = trainer.channel_indices(channels)
    x = sample.channels[idx][None].astype(np.float32)
    if mean is not None and std is not None:
        x = (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    probs = net.forward(Tensor4(x), mode="eval")
    classes = losses.predict_classes(probs)[0]
    pgm.write_pgm(args.out, pgm.classes_to_gray(classes))
    counts = {name: int((classes == c).sum())
              for c, name in enumerate(losses.CLASS_NAMES)}
    sidecar = Path(args.out).with_suffix(".json")
    with open(sidecar, "w") as fh:
        json.dump(counts, fh, indent=2)
        fh.write("\n")
    print(f"wrote {args.out} and {sidecar}: "
          + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_gradcheck(args):
    results = gradcheck_mod.run_suite(seed=args.seed, instances=args.instances,
                                      network_instances=args.instances,
                                      inject_fault=args.inject_bad_backward)
    worst = {}
    for name, report in results:
        base = name.split("[")[0]
        prev = worst.get(base)
        if prev is None or report.max_rel_err > prev[0]:
            worst[base] = (report.max_rel_err, report.tol, report.passed)
    ok = True
    for base, (err, tol, _) in worst.items():
        all_pass = all(r.passed for n, r in results if n.split("[")[0] == base)
        ok &= all_pass
        print(f"{'PASS' if all_pass else 'FAIL'}  {base:<24} "
              f"max rel err {err:.3e}  (tol {tol:.0e})")
    print("gradcheck:", "all passed" if ok else "FAILURES above")
    return 0 if ok else 1


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    handlers = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
                "segment": cmd_segment, "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure -> exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
