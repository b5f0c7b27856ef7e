"""Segmentation losses and pixel metrics.

Classes are indexed 0 = background, 1 = anticyclonic, 2 = cyclonic;
``labels_to_classes`` maps the signed on-disk labels {0, +1, -1} onto that
order. All reductions run in float64 so the reported parts satisfy
``combined = ce - ln(1 - dice_loss)`` to well under 1e-9 regardless of the
activation dtype.
"""

from dataclasses import dataclass

import numpy as np

from eddyseg.autodiff import Tensor4, record

CLASS_NAMES = ("background", "anticyclonic", "cyclonic")
NUM_CLASSES = 3
PROB_FLOOR = 1e-7
DICE_EPS = 1e-7
DICE_LOSS_CEIL = 1.0 - 1e-7


def labels_to_classes(labels):
    """Map signed labels {0, +1, -1} to class indices {0, 1, 2}."""
    labels = np.asarray(labels)
    bad = ~np.isin(labels, (0, 1, -1))
    if bad.any():
        raise ValueError("labels must be -1, 0 or +1")
    classes = np.zeros(labels.shape, dtype=np.int64)
    classes[labels == 1] = 1
    classes[labels == -1] = 2
    return classes


def classes_to_labels(classes):
    """Inverse of labels_to_classes."""
    classes = np.asarray(classes)
    if not np.isin(classes, (0, 1, 2)).all():
        raise ValueError("class indices must be 0, 1 or 2")
    labels = np.zeros(classes.shape, dtype=np.int8)
    labels[classes == 1] = 1
    labels[classes == 2] = -1
    return labels


def one_hot(classes, num_classes=NUM_CLASSES, dtype=np.float32):
    """(n, h, w) class indices -> (n, num_classes, h, w) one-hot array."""
    classes = np.asarray(classes)
    if classes.ndim != 3:
        raise ValueError("classes must be (n, h, w)")
    out = np.zeros((classes.shape[0], num_classes) + classes.shape[1:], dtype=dtype)
    np.put_along_axis(out, classes[:, None].astype(np.int64), 1, axis=1)
    return out


def _check_probs(probs, classes):
    if not isinstance(probs, Tensor4):
        raise TypeError("probs must be a Tensor4")
    n, c, h, w = probs.dims
    if c != NUM_CLASSES:
        raise ValueError(f"expected {NUM_CLASSES} class channels, got {c}")
    classes = np.asarray(classes)
    if classes.shape != (n, h, w):
        raise ValueError("classes shape must match (n, h, w) of probs")
    if not np.isin(classes, (0, 1, 2)).all():
        raise ValueError("class indices must be 0, 1 or 2")
    return classes.astype(np.int64)


def cross_entropy(probs, classes):
    """Mean categorical cross-entropy -1/N sum ln p_true as a scalar tensor.

    True-class probabilities are clamped to >= 1e-7 before the log; clamped
    pixels contribute zero gradient.
    """
    classes = _check_probs(probs, classes)
    n, _, h, w = probs.dims
    npix = n * h * w
    p_true = np.take_along_axis(probs.data, classes[:, None], axis=1)[:, 0]
    clamped = np.maximum(p_true.astype(np.float64), PROB_FLOOR)
    value = -np.log(clamped).sum() / npix
    out = Tensor4(np.full((1, 1, 1, 1), value, dtype=probs.dtype),
                  requires_grad=probs.requires_grad)

    def backward(g):
        scale = float(g.reshape(-1)[0])
        live = (p_true > PROB_FLOOR).astype(probs.dtype)
        grad_true = -scale * live / (np.maximum(p_true, PROB_FLOOR) * npix)
        dprobs = np.zeros(probs.dims, dtype=probs.dtype)
        np.put_along_axis(dprobs, classes[:, None],
                          grad_true[:, None].astype(probs.dtype), axis=1)
        return (dprobs,)

    return record("cross_entropy", (probs,), out, backward)


def dice(probs, truth_onehot):
    """Per-class soft dice and its macro average, as plain floats.

    dice_c = (2 sum P_c G_c + eps) / (sum P_c + sum G_c + eps), summed over
    every pixel of the batch.
    """
    p = probs.data if isinstance(probs, Tensor4) else np.asarray(probs)
    g = np.asarray(truth_onehot)
    if p.shape != g.shape:
        raise ValueError("probs and one-hot truth must have equal dims")
    inter = np.sum(p * g, axis=(0, 2, 3), dtype=np.float64)
    denom = (np.sum(p, axis=(0, 2, 3), dtype=np.float64)
             + np.sum(g, axis=(0, 2, 3), dtype=np.float64))
    per_class = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    return per_class, float(per_class.mean())


def dice_loss_op(probs, truth_onehot):
    """Differentiable macro dice loss 1 - mean_c dice_c.

    Returns (scalar tensor, per-class dice array).
    """
    if not isinstance(probs, Tensor4):
        raise TypeError("probs must be a Tensor4")
    g = np.asarray(truth_onehot)
    if g.shape != probs.dims:
        raise ValueError("one-hot truth dims must match probs")
    inter = np.sum(probs.data * g, axis=(0, 2, 3), dtype=np.float64)
    denom = (np.sum(probs.data, axis=(0, 2, 3), dtype=np.float64)
             + np.sum(g, axis=(0, 2, 3), dtype=np.float64))
    numer = 2.0 * inter + DICE_EPS
    per_class = numer / (denom + DICE_EPS)
    value = 1.0 - per_class.mean()
    out = Tensor4(np.full((1, 1, 1, 1), value, dtype=probs.dtype),
                  requires_grad=probs.requires_grad)

    def backward(upstream):
        scale = float(upstream.reshape(-1)[0])
        d = denom + DICE_EPS
        # d dice_c / dP_c[j] = (2 G_c[j] d_c - numer_c) / d_c^2
        coef_g = (2.0 / d).reshape(1, -1, 1, 1)
        coef_const = (numer / d**2).reshape(1, -1, 1, 1)
        ddice = coef_g * g - coef_const
        dprobs = (-scale / per_class.size) * ddice
        return (dprobs.astype(probs.dtype),)

    return record("dice_loss", (probs,), out, backward), per_class


@dataclass
class LossReport:
    ce: float
    dice_loss: float
    combined: float
    per_class_dice: tuple

    def __post_init__(self):
        expected = combine_values(self.ce, self.dice_loss)
        if abs(self.combined - expected) > 1e-9:
            raise ValueError("combined loss inconsistent with its parts")


def combine_values(ce, dice_loss_value):
    """combined = ce - ln(1 - dice_loss), with the dice term capped below 1."""
    return float(ce) - float(np.log1p(-min(float(dice_loss_value), DICE_LOSS_CEIL)))


def combined_loss(probs, classes, mode="combined"):
    """Training objective and its report.

    mode selects the optimized scalar: "combined" (default) is
    ce - ln(1 - dice_loss), "ce" and "dice" train on a single term. The
    report always carries all parts.
    """
    if mode not in ("combined", "ce", "dice"):
        raise ValueError(f"unknown loss mode: {mode!r}")
    classes = _check_probs(probs, classes)
    ce_t = cross_entropy(probs, classes)
    dl_t, per_class = dice_loss_op(probs, one_hot(classes, dtype=probs.dtype))
    ce_v = float(ce_t.item())
    dl_v = float(dl_t.item())
    report = LossReport(ce=ce_v, dice_loss=dl_v,
                        combined=combine_values(ce_v, dl_v),
                        per_class_dice=tuple(float(d) for d in per_class))
    if mode == "ce":
        return ce_t, report
    if mode == "dice":
        return dl_t, report

    dl_clamped = min(dl_v, DICE_LOSS_CEIL)
    out = Tensor4(np.full((1, 1, 1, 1), report.combined, dtype=probs.dtype),
                  requires_grad=ce_t.requires_grad or dl_t.requires_grad)

    def backward(g):
        scale = float(g.reshape(-1)[0])
        dce = np.full((1, 1, 1, 1), scale, dtype=probs.dtype)
        if dl_v < DICE_LOSS_CEIL:
            ddl = np.full((1, 1, 1, 1), scale / (1.0 - dl_clamped), dtype=probs.dtype)
        else:
            ddl = np.zeros((1, 1, 1, 1), dtype=probs.dtype)
        return (dce, ddl)

    return record("combine", (ce_t, dl_t), out, backward), report


@dataclass
class Metrics:
    pixel_accuracy: float
    confusion: np.ndarray  # (3, 3) int64, rows = truth, cols = prediction
    precision: tuple
    recall: tuple


def predict_classes(probs):
    """Per-pixel argmax over the class channel; ties resolve to the lowest
    class index."""
    data = probs.data if isinstance(probs, Tensor4) else np.asarray(probs)
    return np.argmax(data, axis=1)


def pixel_accuracy(pred_classes, truth_classes):
    """Confusion matrix, accuracy and per-class precision/recall."""
    pred = np.asarray(pred_classes).reshape(-1)
    truth = np.asarray(truth_classes).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth must have equal size")
    for arr in (pred, truth):
        if not np.isin(arr, (0, 1, 2)).all():
            raise ValueError("class indices must be 0, 1 or 2")
    conf = np.bincount(truth * NUM_CLASSES + pred,
                       minlength=NUM_CLASSES**2).reshape(NUM_CLASSES, NUM_CLASSES)
    total = conf.sum()
    correct = np.trace(conf)
    col = conf.sum(axis=0)
    row = conf.sum(axis=1)
    diag = np.diag(conf)
    precision = tuple(float(diag[c] / col[c]) if col[c] else 0.0
                      for c in range(NUM_CLASSES))
    recall = tuple(float(diag[c] / row[c]) if row[c] else 0.0
                   for c in range(NUM_CLASSES))
    return Metrics(pixel_accuracy=float(correct / total) if total else 0.0,
                   confusion=conf.astype(np.int64),
                   precision=precision, recall=recall)
