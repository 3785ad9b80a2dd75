"""Per-patch explanation maps for a trained model and their PGM / CSV export.

* ``prob_map``: per-patch class probability (instance-level models only).
* ``grad_map``: L2 norm of d(class score)/d(z_j) per patch, scaled so the max is 1.
  The score is the pooled probability for I1 and the pooled logit for I2/E,
  so maps are comparable within one ordering only.
* ``selection_map``: for embedding-level models, the fraction of feature
  columns whose top-k set contains each patch. This one is our own
  construction; the instance-level maps are the ones the method describes.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, sigmoid_values, softmax_values, take
from .data import write_csv_matrix, write_pgm
from .errors import NonFiniteError, ShapeError, ValidationError
from .metrics import dumps17

KINDS = ("probability", "gradient", "selection")


@dataclass
class Heatmap:
    values: np.ndarray  # N x N in [0, 1]
    kind: str
    class_index: int
    selected: list = field(default_factory=list)
    k_used: int = 0

    @property
    def N(self):
        return self.values.shape[0]

    def sidecar(self) -> dict:
        out = {"kind": self.kind, "class_index": self.class_index, "N": self.N,
               "k_used": self.k_used, "selected_indices": [int(i) for i in self.selected]}
        if self.kind == "selection":
            out["note"] = "embedding-level selection frequency; an extension, not part of the original method"
        return out


def grid_side(m: int) -> int:
    n = math.isqrt(m)
    if n * n != m:
        raise ShapeError(f"bag of {m} instances is not an N x N patch grid")
    return n


def _check_class(model, class_index):
    if not 0 <= class_index < model.config.label_count:
        raise ValidationError(f"class index {class_index} out of range for {model.config.label_count} classes")


def _column(model, class_index):
    """Column of the head output that explains ``class_index`` (binary heads have one)."""
    return 0 if model.config.n_classes == 1 else class_index


def prob_map(model, payload, class_index: int) -> Heatmap:
    if model.config.ordering == "E":
        raise ValidationError("prob_map needs an instance-level (I1/I2) model; use selection_map for E")
    _check_class(model, class_index)
    tr, _, _ = model.record(Graph(), payload)
    logits = tr.patch_logits.data
    if model.config.n_classes == 1:
        p = sigmoid_values(logits[:, 0])
        if class_index == 0:
            p = 1.0 - p
    else:
        p = softmax_values(logits)[:, class_index]
    n = grid_side(p.shape[0])
    col = _column(model, class_index)
    return Heatmap(p.reshape(n, n), "probability", class_index, tr.selected[:, col].tolist(), tr.k)


def raw_patch_gradients(model, payload, class_index: int) -> np.ndarray:
    """d(class score)/dZ, one row per patch."""
    _check_class(model, class_index)
    g = Graph()
    tr, _, Z = model.record(g, payload, bag_leaf=True)
    score = take(tr.score, _column(model, class_index))
    g.backward(score)
    grad = Z.grad
    if model.config.n_classes == 1 and class_index == 0:
        grad = -grad
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite patch gradients")
    return grad


def grad_map(model, payload, class_index: int) -> Heatmap:
    grad = raw_patch_gradients(model, payload, class_index)
    norms = np.sqrt((grad * grad).sum(axis=1))
    peak = norms.max()
    if peak > 0.0:
        norms = norms / peak
    n = grid_side(norms.shape[0])
    tr, _, _ = model.record(Graph(), payload)
    col = _column(model, class_index) if model.config.ordering != "E" else None
    selected = tr.selected[:, col].tolist() if col is not None else sorted(set(tr.selected.ravel().tolist()))
    return Heatmap(norms.reshape(n, n), "gradient", class_index, selected, tr.k)


def selection_map(model, payload) -> Heatmap:
    cfg = model.config
    if cfg.ordering != "E":
        raise ValidationError("selection_map needs an embedding-level (E) model")
    if cfg.pooling == "average":
        raise ValidationError("selection_map is meaningless with average pooling: every patch is selected")
    tr, _, Z = model.record(Graph(), payload)
    m, d = Z.shape
    counts = np.zeros(m)
    for col in range(d):
        counts[tr.selected[:, col]] += 1.0
    n = grid_side(m)
    return Heatmap((counts / d).reshape(n, n), "selection", -1,
                   sorted(set(tr.selected.ravel().tolist())), tr.k)


def quantize(values) -> np.ndarray:
    """round(255 * v), halves rounded up."""
    return np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5).astype(np.int64)


def export_heatmap(hm: Heatmap, path, fmt: str = "pgm", sidecar: bool = True):
    if hm.values.ndim != 2 or hm.values.shape[0] != hm.values.shape[1]:
        raise ShapeError(f"heatmap must be N x N, got {hm.values.shape}")
    if np.any(hm.values < 0.0) or np.any(hm.values > 1.0):
        raise ValidationError("heatmap values must lie in [0, 1]")
    if fmt == "pgm":
        write_pgm(path, quantize(hm.values))
    elif fmt == "csv":
        write_csv_matrix(path, hm.values)
    else:
        raise ValidationError(f"format must be 'pgm' or 'csv', got {fmt!r}")
    if sidecar:
        with open(os.path.splitext(path)[0] + ".json", "w", encoding="utf-8") as fh:
            fh.write(dumps17(hm.sidecar()) + "\n")


def explanation_precision(selected, key_mask) -> float:
    """Fraction of selected patches that are ground-truth key instances."""
    selected = list(selected)
    if not selected:
        return 0.0
    key_mask = np.asarray(key_mask, dtype=bool)
    return float(np.mean(key_mask[np.asarray(selected)]))
