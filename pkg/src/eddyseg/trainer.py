"""Adam training loop with a reduce-on-plateau schedule.

Validation runs on the test split after every epoch; the checkpoint keeps
the best-validation-loss weights. History rows aggregate per pixel: ce is
the pixel-weighted mean, the dice term comes from split-wide sums, and the
combined column is recomputed from those aggregates so every row satisfies
combined = ce - ln(1 - dice_loss) exactly.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from eddyseg import datapack, losses
from eddyseg.autodiff import NonFiniteError, Tape, Tensor4
from eddyseg.datapack import CHANNEL_NAMES
from eddyseg.losses import (DICE_EPS, LossReport, combine_values,
                            combined_loss, labels_to_classes, one_hot,
                            predict_classes)
from eddyseg.network import NetworkSpec, build_network

LOSS_MODES = ("combined", "ce", "dice")
_LOSS_ALIASES = {"ce_only": "ce", "dice_only": "dice"}


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    min_lr: float = 1e-30
    batch: int = 8
    epochs: int = 50
    loss: str = "combined"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    seed: int = 0
    channels: tuple = CHANNEL_NAMES
    dilation: bool = True

    def __post_init__(self):
        self.loss = _LOSS_ALIASES.get(self.loss, self.loss)
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")
        if not 0 < self.min_lr <= self.lr0:
            raise ValueError("need 0 < min_lr <= lr0")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")
        self.channels = tuple(self.channels)
        if not self.channels:
            raise ValueError("need at least one input channel")
        for name in self.channels:
            if name not in CHANNEL_NAMES:
                raise ValueError(f"unknown channel {name!r}")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("duplicate channel in selection")

    @property
    def dilation_rate(self):
        return 4 if self.dilation else 1


@dataclass
class HistoryRow:
    epoch: int
    loss: float
    ce: float
    dice_loss: float
    train_acc: float
    val_acc: float
    lr: float


@dataclass
class TrainState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    best_val: float = math.inf
    wait: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, net, cfg):
        m = {name: np.zeros(t.dims, dtype=np.float64)
             for name, t in net.params.items()}
        v = {name: np.zeros(t.dims, dtype=np.float64)
             for name, t in net.params.items()}
        return cls(m=m, v=v, lr=cfg.lr0)


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update over every parameter; grads maps
    name -> array, and a missing entry counts as zero (moments still
    decay)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.dims, dtype=np.float64)
        if g.shape != p.dims:
            raise ValueError(f"gradient dims mismatch for {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name!r} at step {t}")
        g = g.astype(np.float64)
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)


def lr_on_plateau(state, val_loss, cfg):
    """Reduce lr by plateau_factor once val loss stalls for patience epochs.

    An improvement is a drop of more than plateau_min_delta below the best
    seen; the wait counter resets on improvement and after each reduction.
    """
    if val_loss < state.best_val - cfg.plateau_min_delta:
        state.best_val = val_loss
        state.wait = 0
        return
    state.wait += 1
    if state.wait >= cfg.plateau_patience:
        state.lr = max(state.lr * cfg.plateau_factor, cfg.min_lr)
        state.wait = 0


def channel_indices(channels):
    return [CHANNEL_NAMES.index(name) for name in channels]


def load_split(manifest, data_dir, split, channels=CHANNEL_NAMES):
    """Stack a split into (X: (n, c, h, w) float32 normalized, Y: (n, h, w)
    int64 class indices)."""
    idx = channel_indices(channels)
    xs, ys = [], []
    for name in manifest.paths(split):
        sample = datapack.read_sample(f"{data_dir}/{name}")
        sample = datapack.normalize(sample, manifest.stats)
        xs.append(sample.channels[idx])
        ys.append(labels_to_classes(sample.labels))
    if not xs:
        raise ValueError(f"manifest has no {split!r} samples")
    return np.stack(xs), np.stack(ys)


def _objective(report, mode):
    return {"combined": report.combined, "ce": report.ce,
            "dice": report.dice_loss}[mode]


def evaluate(net, x, y, batch=8, loss_mode="combined"):
    """Eval-mode metrics and loss over a split.

    CE is the pixel-weighted mean, dice aggregates split-wide sums, and the
    combined value is recomputed from the two so the report identity holds.
    Returns (Metrics, LossReport, objective value for loss_mode).
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("evaluate: empty split")
    ce_weighted = 0.0
    npix = 0
    inter = np.zeros(losses.NUM_CLASSES, dtype=np.float64)
    denom = np.zeros(losses.NUM_CLASSES, dtype=np.float64)
    conf = np.zeros((losses.NUM_CLASSES, losses.NUM_CLASSES), dtype=np.int64)
    for s in range(0, n, batch):
        xb = Tensor4(x[s:s + batch])
        yb = y[s:s + batch]
        probs = net.forward(xb, mode="eval")
        _, report = combined_loss(probs, yb)
        pix = yb.size
        ce_weighted += report.ce * pix
        npix += pix
        g = one_hot(yb, dtype=np.float64)
        inter += np.sum(probs.data.astype(np.float64) * g, axis=(0, 2, 3))
        denom += (np.sum(probs.data, axis=(0, 2, 3), dtype=np.float64)
                  + np.sum(g, axis=(0, 2, 3)))
        pred = predict_classes(probs)
        conf += losses.pixel_accuracy(pred, yb).confusion
    ce = ce_weighted / npix
    per_class = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    dice_loss = 1.0 - float(per_class.mean())
    report = LossReport(ce=ce, dice_loss=dice_loss,
                        combined=combine_values(ce, dice_loss),
                        per_class_dice=tuple(float(d) for d in per_class))
    metrics = _metrics_from_confusion(conf)
    return metrics, report, _objective(report, loss_mode)


def _metrics_from_confusion(conf):
    total = conf.sum()
    diag = np.diag(conf)
    col = conf.sum(axis=0)
    row = conf.sum(axis=1)
    return losses.Metrics(
        pixel_accuracy=float(diag.sum() / total) if total else 0.0,
        confusion=conf,
        precision=tuple(float(diag[c] / col[c]) if col[c] else 0.0
                        for c in range(losses.NUM_CLASSES)),
        recall=tuple(float(diag[c] / row[c]) if row[c] else 0.0
                     for c in range(losses.NUM_CLASSES)))


def train(cfg, x_train, y_train, x_val, y_val, progress=None):
    """Full training run on pre-loaded arrays.

    Deterministic given cfg.seed: init, shuffles and dropout draw from
    fixed substreams. Returns (net, state) with the best-validation-loss
    weights restored into net.
    """
    init_rng = np.random.default_rng([cfg.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 1])
    shuffle_rng = np.random.default_rng([cfg.seed, 2])

    spec = NetworkSpec(in_channels=x_train.shape[1],
                       dilation_rate=cfg.dilation_rate)
    net = build_network(spec, init_rng, dtype=np.float32)
    state = TrainState.create(net, cfg)

    n = x_train.shape[0]
    best_ckpt_val = math.inf
    best_snapshot = None
    for epoch in range(1, cfg.epochs + 1):
        lr_used = state.lr
        order = shuffle_rng.permutation(n)
        ce_weighted = 0.0
        npix = 0
        inter = np.zeros(losses.NUM_CLASSES, dtype=np.float64)
        denom = np.zeros(losses.NUM_CLASSES, dtype=np.float64)
        correct = 0
        for s in range(0, n, cfg.batch):
            sel = order[s:s + cfg.batch]
            xb = Tensor4(x_train[sel])
            yb = y_train[sel]
            net.zero_grad()
            try:
                with Tape() as tape:
                    probs = net.forward(xb, mode="train", rng=drop_rng)
                    loss_t, report = combined_loss(probs, yb, mode=cfg.loss)
                tape.backward(loss_t)
                grads = {name: t.grad for name, t in net.params.items()
                         if t.grad is not None}
                adam_step(net.params, grads, state, cfg)
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"epoch {epoch}, batch {s // cfg.batch}: {exc}") from exc
            pix = yb.size
            ce_weighted += report.ce * pix
            npix += pix
            g = one_hot(yb, dtype=np.float64)
            inter += np.sum(probs.data.astype(np.float64) * g, axis=(0, 2, 3))
            denom += (np.sum(probs.data, axis=(0, 2, 3), dtype=np.float64)
                      + np.sum(g, axis=(0, 2, 3)))
            correct += int((predict_classes(probs) == yb).sum())
        train_ce = ce_weighted / npix
        per_class = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
        train_dl = 1.0 - float(per_class.mean())
        train_loss = {"combined": combine_values(train_ce, train_dl),
                      "ce": train_ce, "dice": train_dl}[cfg.loss]
        train_acc = correct / npix

        val_metrics, _, val_loss = evaluate(net, x_val, y_val,
                                            batch=cfg.batch, loss_mode=cfg.loss)
        if val_loss < best_ckpt_val:
            best_ckpt_val = val_loss
            best_snapshot = {name: arr.copy()
                             for name, arr in net.named_state().items()}
        lr_on_plateau(state, val_loss, cfg)
        row = HistoryRow(epoch=epoch, loss=train_loss, ce=train_ce,
                         dice_loss=train_dl, train_acc=train_acc,
                         val_acc=val_metrics.pixel_accuracy, lr=lr_used)
        state.history.append(row)
        if progress is not None:
            progress(row)

    if best_snapshot is not None:
        for name, t in net.params.items():
            t.data = best_snapshot[name].astype(net.dtype)
        for key, bn in net.bn_states.items():
            bn.running_mean = best_snapshot[f"{key}.running_mean"].astype(net.dtype)
            bn.running_var = best_snapshot[f"{key}.running_var"].astype(net.dtype)
    return net, state


def train_from_manifest(cfg, manifest, data_dir, progress=None):
    x_train, y_train = load_split(manifest, data_dir, "train", cfg.channels)
    x_val, y_val = load_split(manifest, data_dir, "test", cfg.channels)
    return train(cfg, x_train, y_train, x_val, y_val, progress=progress)


def overfit_probe(x, y, cfg=None, steps=300):
    """Drive one batch to near-zero loss; the standard capacity probe.

    Dropout is disabled: the probe measures whether the architecture can
    memorize a single batch, and stochastic regularization both injects noise
    into the loss readout and actively fights memorization. The default
    learning rate is 1e-2 rather than the training default; a 300-step
    memorization budget wants the aggressive end of Adam's stable range.
    Everything else (init, Adam, loss) matches regular training. Pass ``cfg``
    to override.

    Returns the per-step combined-loss values.
    """
    cfg = cfg or TrainConfig(epochs=1, lr0=1e-2)
    init_rng = np.random.default_rng([cfg.seed, 0])
    spec = NetworkSpec(in_channels=x.shape[1], dilation_rate=cfg.dilation_rate,
                       dropout_down=0.0, dropout_transition=0.0)
    net = build_network(spec, init_rng, dtype=np.float32)
    state = TrainState.create(net, cfg)
    xb = Tensor4(x)
    curve = []
    for _ in range(steps):
        net.zero_grad()
        with Tape() as tape:
            probs = net.forward(xb, mode="train")
            loss_t, report = combined_loss(probs, y, mode=cfg.loss)
        tape.backward(loss_t)
        grads = {name: t.grad for name, t in net.params.items()
                 if t.grad is not None}
        adam_step(net.params, grads, state, cfg)
        curve.append(report.combined)
    return net, curve


def history_to_csv(history, path):
    """history.csv: header epoch,loss,ce,dice_loss,train_acc,val_acc,lr."""
    with open(path, "w") as fh:
        fh.write("epoch,loss,ce,dice_loss,train_acc,val_acc,lr\n")
        for r in history:
            fh.write(f"{r.epoch},{r.loss:.9f},{r.ce:.9f},{r.dice_loss:.9f},"
                     f"{r.train_acc:.6f},{r.val_acc:.6f},{r.lr:.3e}\n")
