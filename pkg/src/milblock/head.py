"""The MIL classification block: projection h, top-k pooling phi, activation sigma.

Orderings:

* ``I1``: sigma(h(Z)) per patch, then pool per class.
* ``I2``: h(Z) per patch, pool the logits per class, then sigma.
* ``E``:  pool Z per feature column, then h, then sigma.

``n_classes == 1`` is the binary case (sigmoid); otherwise softmax.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Graph, Tensor, matmul_bias, reshape, sigmoid, softmax_rows, topk_mean_columns
from .errors import ShapeError, ValidationError

ORDERINGS = ("I1", "I2", "E")
POOLINGS = ("max", "topk", "average")


@dataclass(frozen=True)
class MilConfig:
    ordering: str = "I1"
    pooling: str = "topk"
    k_fraction: float = 0.25
    n_classes: int = 1
    dim: int = 16

    def __post_init__(self):
        if self.ordering not in ORDERINGS:
            raise ValidationError(f"ordering must be one of {ORDERINGS}, got {self.ordering!r}")
        if self.pooling not in POOLINGS:
            raise ValidationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if not 0.0 < float(self.k_fraction) <= 1.0:
            raise ValidationError(f"k_fraction must be in (0, 1], got {self.k_fraction}")
        if int(self.n_classes) < 1:
            raise ValidationError(f"n_classes must be >= 1, got {self.n_classes}")
        if int(self.dim) < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")

    @property
    def label_count(self):
        """Number of distinct labels: 2 for the single-logit binary head."""
        return max(self.n_classes, 2)

    def to_dict(self):
        return asdict(self)


@dataclass
class HeadParams:
    W: np.ndarray  # C x D
    b: np.ndarray  # C


@dataclass
class Prediction:
    probs: np.ndarray
    label: int
    selected: np.ndarray  # k x C (instance level) or k x D (embedding level)
    k: int


@dataclass
class HeadTrace:
    """Graph nodes from one forward pass, for training and explanations."""

    probs: Tensor          # (C,)
    score: Tensor          # (C,) pooled probabilities for I1, pooled logits otherwise
    selected: np.ndarray
    k: int
    patch_logits: Tensor = None   # M x C, instance level only
    patch_probs: Tensor = None    # M x C, I1 only
    pooled_features: Tensor = None  # (D,), E only


def resolve_k(k_fraction: float, m: int, pooling: str = "topk") -> int:
    """Number of instances averaged by the pooling step for a bag of ``m``."""
    if pooling == "max":
        return 1
    if pooling == "average":
        return m
    # 0.07 * 100 == 7.000000000000001 must still give 7
    k = math.ceil(k_fraction * m - 1e-9)
    return min(max(k, 1), m)


def _activate(logits: Tensor) -> Tensor:
    """sigma applied to each row of an M×C logit matrix."""
    if logits.shape[1] == 1:
        return sigmoid(logits)
    return softmax_rows(logits)


def _activate_vector(v: Tensor) -> Tensor:
    c = v.shape[0]
    return reshape(_activate(reshape(v, (1, c))), (c,))


def project(Z: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Per-patch logits, row j = W z_j + b."""
    return matmul_bias(W, Z, b)


def trace(Z: Tensor, W: Tensor, b: Tensor, config: MilConfig) -> HeadTrace:
    if Z.data.ndim != 2:
        raise ShapeError(f"bag must be an M×D matrix, got shape {Z.shape}")
    m, d = Z.shape
    if d != config.dim:
        raise ShapeError(f"bag has D={d} but the head expects D={config.dim}")
    if W.shape != (config.n_classes, config.dim) or b.shape != (config.n_classes,):
        raise ShapeError(f"head params {W.shape}/{b.shape} do not match C={config.n_classes}, D={config.dim}")
    k = resolve_k(config.k_fraction, m, config.pooling)

    if config.ordering == "I1":
        logits = project(Z, W, b)
        patch_probs = _activate(logits)
        pooled = topk_mean_columns(patch_probs, k)
        return HeadTrace(pooled, pooled, pooled.extra, k, patch_logits=logits, patch_probs=patch_probs)
    if config.ordering == "I2":
        logits = project(Z, W, b)
        pooled = topk_mean_columns(logits, k)
        return HeadTrace(_activate_vector(pooled), pooled, pooled.extra, k, patch_logits=logits)
    pooled_z = topk_mean_columns(Z, k)
    logit = reshape(project(reshape(pooled_z, (1, d)), W, b), (config.n_classes,))
    return HeadTrace(_activate_vector(logit), logit, pooled_z.extra, k, pooled_features=pooled_z)


def predict_label(probs, n_classes: int) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (n_classes,):
        raise ShapeError(f"expected {n_classes} probabilities, got shape {probs.shape}")
    if n_classes == 1:
        return int(probs[0] > 0.5)
    return int(np.argmax(probs))


def forward(Z, head: HeadParams, config: MilConfig) -> Prediction:
    if isinstance(Z, Tensor):
        g, Zt = Z.graph, Z
    else:
        g = Graph()
        Zt = g.constant(Z)
    tr = trace(Zt, g.constant(head.W), g.constant(head.b), config)
    probs = tr.probs.data.copy()
    return Prediction(probs, predict_label(probs, config.n_classes), tr.selected, tr.k)


def _forward_as(ordering, Z, head, config):
    if config.ordering != ordering:
        raise ValidationError(f"config ordering is {config.ordering}, not {ordering}")
    return forward(Z, head, config)


def forward_i1(Z, head: HeadParams, config: MilConfig) -> Prediction:
    return _forward_as("I1", Z, head, config)


def forward_i2(Z, head: HeadParams, config: MilConfig) -> Prediction:
    return _forward_as("I2", Z, head, config)


def forward_e(Z, head: HeadParams, config: MilConfig) -> Prediction:
    return _forward_as("E", Z, head, config)


def init_head(n_classes: int, dim: int, stream, scheme: str = "uniform") -> HeadParams:
    """``uniform``: W ~ U(-1/sqrt(D), 1/sqrt(D)); ``zeros``: all-zero W. Bias is zero."""
    if scheme == "zeros":
        return HeadParams(np.zeros((n_classes, dim)), np.zeros(n_classes))
    if scheme != "uniform":
        raise ValidationError(f"unknown head init {scheme!r}")
    bound = 1.0 / math.sqrt(dim)
    W = stream.uniform(-bound, bound, n_classes * dim).reshape(n_classes, dim)
    return HeadParams(W, np.zeros(n_classes))
