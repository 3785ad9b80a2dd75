"""Top-k multiple-instance-learning classification block, trainable end to end."""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .autodiff import Graph, Tensor, grad_check
from .data import BagRecord, Dataset, SyntheticSpec, generate, load_dataset, save_dataset, split
from .errors import FormatError, MilError, NonFiniteError, ShapeError, ValidationError
from .head import HeadParams, MilConfig, Prediction, forward, forward_e, forward_i1, forward_i2, predict_label, resolve_k
from .metrics import ConfusionMatrix, balanced_accuracy, class_weights_from_counts, weighted_ce
from .rng import RandomStream
from .training import MilModel, TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint

__all__ = [
    "BACKEND", "Graph", "Tensor", "grad_check",
    "BagRecord", "Dataset", "SyntheticSpec", "generate", "load_dataset", "save_dataset", "split",
    "FormatError", "MilError", "NonFiniteError", "ShapeError", "ValidationError",
    "HeadParams", "MilConfig", "Prediction", "forward", "forward_e", "forward_i1", "forward_i2",
    "predict_label", "resolve_k",
    "ConfusionMatrix", "balanced_accuracy", "class_weights_from_counts", "weighted_ce",
    "RandomStream",
    "MilModel", "TrainConfig", "evaluate", "fit", "load_checkpoint", "save_checkpoint",
]
