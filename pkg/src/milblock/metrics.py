"""Class-weighted cross entropy, confusion matrices and balanced accuracy."""

import json
import math
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .autodiff import Tensor, clamp, log, scale, sub, take, total
from .errors import ValidationError

PROB_EPS = 1e-12


def class_weights_from_counts(counts) -> np.ndarray:
    """Inverse-frequency weights ``total / (n_labels * n_c)``."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValidationError(f"need one count per label (at least 2), got {counts.shape}")
    if np.any(counts < 1):
        raise ValidationError(f"every class needs at least one example, counts={counts.tolist()}")
    return counts.sum() / (counts.size * counts)


def weighted_ce(probs: Tensor, y: int, weights, normalize: bool = False) -> Tensor:
    """Scalar loss node. For a single sigmoid output, ``weights`` has two
    entries indexed by the binary label.

    ``normalize`` (C >= 2 only) scores ``probs[y] / sum(probs)`` instead of
    ``probs[y]``. I1 pooling yields per-class scores that need not sum to 1;
    without normalising, nothing in the loss pushes the wrong-class scores down.
    """
    weights = np.asarray(weights, dtype=np.float64)
    c = probs.shape[0]
    n_labels = max(c, 2)
    if not 0 <= y < n_labels:
        raise ValidationError(f"label {y} out of range for {n_labels} classes")
    if weights.shape != (n_labels,):
        raise ValidationError(f"expected {n_labels} class weights, got {weights.shape}")
    p = take(probs, 0 if c == 1 else y)
    if c == 1 and y == 0:
        p = sub(1.0, p)
    logp = log(clamp(p, PROB_EPS, 1.0))
    if normalize and c >= 2:
        logp = sub(logp, log(clamp(total(probs), PROB_EPS, math.inf)))
    return scale(logp, -weights[y])


class ConfusionMatrix:
    """Rows are true labels, columns predicted labels."""

    def __init__(self, n_labels: int, counts=None):
        self.n_labels = int(n_labels)
        if counts is None:
            self.counts = np.zeros((self.n_labels, self.n_labels), dtype=np.int64)
        else:
            self.counts = np.array(counts, dtype=np.int64)
            if self.counts.shape != (self.n_labels, self.n_labels) or np.any(self.counts < 0):
                raise ValidationError("confusion counts must be a non-negative square matrix")

    def update(self, true_label: int, predicted_label: int):
        for lab in (true_label, predicted_label):
            if not 0 <= lab < self.n_labels:
                raise ValidationError(f"label {lab} out of range for {self.n_labels} classes")
        self.counts[true_label, predicted_label] += 1
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_labels != self.n_labels:
            raise ValidationError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.n_labels, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


def confusion_update(cm: ConfusionMatrix, true_label: int, predicted_label: int) -> ConfusionMatrix:
    return cm.update(true_label, predicted_label)


def balanced_accuracy(cm: ConfusionMatrix):
    """Mean per-class recall. Returns ``(ba, recalls)``."""
    support = cm.counts.sum(axis=1)
    missing = np.flatnonzero(support == 0)
    if missing.size:
        raise ValidationError(f"no true examples for class(es) {missing.tolist()}; balanced accuracy undefined")
    recalls = [cm.counts[c, c] / support[c] for c in range(cm.n_labels)]
    return balanced_accuracy_from_recalls(recalls), recalls


def balanced_accuracy_from_recalls(recalls) -> float:
    acc = 0.0
    for r in recalls:
        acc += float(r)
    return acc / len(recalls)


def format_percent(x: float, digits: int = 1) -> str:
    """Render a fraction as a percentage, rounding half up on its shortest decimal form.

    0.9065 -> "90.7" (binary arithmetic would give 90.64999... and round down).
    """
    q = Decimal(1).scaleb(-digits)
    return str((Decimal(repr(float(x))) * 100).quantize(q, rounding=ROUND_HALF_UP))


def metrics_report(cm: ConfusionMatrix) -> dict:
    ba, recalls = balanced_accuracy(cm)
    return {"ba": float(ba), "recalls": [float(r) for r in recalls], "confusion": cm.counts.tolist()}


# -- JSON with 17 significant digits ----------------------------------------------


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def dumps17(obj) -> str:
    """JSON text where every float is written with 17 significant digits."""

    def enc(o):
        if isinstance(o, (bool, np.bool_)):
            return "true" if o else "false"
        if o is None:
            return "null"
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            if not np.isfinite(o):
                raise ValidationError("cannot serialise a non-finite float")
            return format_float(o)
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, dict):
            return "{" + ", ".join(f"{json.dumps(str(k))}: {enc(v)}" for k, v in o.items()) + "}"
        if isinstance(o, (list, tuple, np.ndarray)):
            return "[" + ", ".join(enc(v) for v in o) + "]"
        raise TypeError(f"cannot serialise {type(o).__name__}")

    return enc(obj)
