"""Adam training of encoder + MIL head, evaluation, and the binary checkpoint format.

Checkpoint layout::

    b"MILCKPT1"
    uint64 little-endian: header length in bytes
    header: UTF-8 JSON (mil_config, encoder dims or null, parameter manifest,
            seed, epoch, metadata)
    payload: little-endian float64 parameters, in manifest order
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import Graph
from .data import Dataset
from .encoder import EncoderParams, encode_graph, init_encoder, patchify
from .errors import FormatError, NonFiniteError, ShapeError, ValidationError
from .head import HeadParams, MilConfig, init_head, predict_label, trace
from .metrics import ConfusionMatrix, class_weights_from_counts, metrics_report, weighted_ce
from .rng import RandomStream

log = logging.getLogger(__name__)

MAGIC = b"MILCKPT1"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    seed: int = 0
    mode: str = "bags"
    head_init: str = "uniform"
    # I1 with C >= 2: score probs[y] / sum(probs) in the loss ("normalized")
    # or the raw pooled probs[y] ("true_class")
    i1_loss: str = "normalized"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if int(self.epochs) < 1:
            raise ValidationError("epochs must be at least 1")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must be in (0, 1)")
        if not self.eps > 0:
            raise ValidationError("eps must be positive")
        if self.mode not in ("bags", "images"):
            raise ValidationError(f"mode must be 'bags' or 'images', got {self.mode!r}")
        if self.i1_loss not in ("normalized", "true_class"):
            raise ValidationError(f"i1_loss must be 'normalized' or 'true_class', got {self.i1_loss!r}")
        if self.head_init not in ("uniform", "zeros"):
            raise ValidationError(f"head_init must be 'uniform' or 'zeros', got {self.head_init!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown train key: {unknown[0]}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return params, state


# -- model --------------------------------------------------------------------------


class MilModel:
    """MIL head, optionally preceded by the patch encoder (images mode)."""

    def __init__(self, config: MilConfig, head: HeadParams, encoder: EncoderParams = None):
        self.config = config
        self.head = head
        self.encoder = encoder
        if head.W.shape != (config.n_classes, config.dim) or head.b.shape != (config.n_classes,):
            raise ShapeError("head parameters do not match the MIL config")
        if encoder is not None:
            encoder.validate()
            if encoder.dim != config.dim:
                raise ShapeError(f"encoder outputs D={encoder.dim}, head expects D={config.dim}")

    @property
    def mode(self):
        return "images" if self.encoder is not None else "bags"

    def params(self) -> dict:
        """Named parameter arrays, in checkpoint order. These are live references."""
        out = {}
        if self.encoder is not None:
            out.update({"encoder.W1": self.encoder.W1, "encoder.b1": self.encoder.b1,
                        "encoder.W2": self.encoder.W2, "encoder.b2": self.encoder.b2})
        out.update({"head.W": self.head.W, "head.b": self.head.b})
        return out

    def copy(self) -> "MilModel":
        enc = None
        if self.encoder is not None:
            e = self.encoder
            enc = EncoderParams(e.W1.copy(), e.b1.copy(), e.W2.copy(), e.b2.copy(), e.patch)
        return MilModel(self.config, HeadParams(self.head.W.copy(), self.head.b.copy()), enc)

    def check_dataset(self, dataset: Dataset):
        if dataset.n_classes != self.config.label_count:
            raise ShapeError(f"dataset has {dataset.n_classes} classes, model predicts {self.config.label_count}")
        if self.encoder is None:
            if dataset.mode != "embeddings":
                raise ShapeError("a bags-mode model needs an embeddings dataset")
            if dataset.dim != self.config.dim:
                raise ShapeError(f"dataset has D={dataset.dim}, model expects D={self.config.dim}")
        else:
            if dataset.mode != "images":
                raise ShapeError("an images-mode model needs an images dataset")
            if dataset.patch != self.encoder.patch:
                raise ShapeError(f"dataset patch side {dataset.patch} != encoder patch side {self.encoder.patch}")

    def bag_input(self, payload) -> np.ndarray:
        """The array fed to the first differentiable stage: Z, or the patch matrix."""
        if self.encoder is None:
            return payload
        return patchify(payload, self.encoder.patch)

    def record(self, graph: Graph, payload, bag_leaf=False):
        """Record a forward pass. Returns ``(trace, param_leaves, Z)``.

        With ``bag_leaf`` the bag representation Z is made a leaf, so
        gradients with respect to each patch row are available afterwards.
        """
        leaves = {name: graph.leaf(arr, name=name) for name, arr in self.params().items()}
        if self.encoder is None:
            Z = graph.leaf(payload, name="Z") if bag_leaf else graph.constant(payload)
        else:
            patches = graph.constant(self.bag_input(payload))
            Z = encode_graph(patches, leaves["encoder.W1"], leaves["encoder.b1"],
                             leaves["encoder.W2"], leaves["encoder.b2"])
            if bag_leaf:
                Z = graph.leaf(Z.data, name="Z")
        return trace(Z, leaves["head.W"], leaves["head.b"], self.config), leaves, Z

    def predict(self, payload):
        tr, _, _ = self.record(Graph(), payload)
        probs = tr.probs.data.copy()
        return probs, predict_label(probs, self.config.n_classes)


def init_model(config: MilConfig, stream: RandomStream, patch=None, hidden=None, head_init="uniform") -> MilModel:
    encoder = None
    if patch is not None:
        encoder = init_encoder(patch, hidden, config.dim, stream)
    return MilModel(config, init_head(config.n_classes, config.dim, stream, head_init), encoder)


# -- training ------------------------------------------------------------------------


def loss_and_grads(model: MilModel, payload, label: int, weights, i1_loss="normalized"):
    g = Graph()
    tr, leaves, _ = model.record(g, payload)
    normalize = model.config.ordering == "I1" and i1_loss == "normalized"
    loss = weighted_ce(tr.probs, label, weights, normalize=normalize)
    g.backward(loss)
    return float(loss.data), {name: leaf.grad for name, leaf in leaves.items()}


@dataclass
class FitResult:
    model: MilModel
    log: list
    best_epoch: int
    best_val_ba: float
    last_model: MilModel = None


def fit(train_set: Dataset, val_set: Dataset, mil_config: MilConfig, train_config: TrainConfig,
        hidden: int = None, on_epoch=None) -> FitResult:
    """Train with batch size 1; keep the parameters of the best validation-BA epoch."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    if train_set.mode != val_set.mode:
        raise ValidationError("training and validation sets have different modes")
    want = "embeddings" if train_config.mode == "bags" else "images"
    if train_set.mode != want:
        raise ValidationError(f"train mode {train_config.mode!r} needs a {want} dataset, got {train_set.mode}")
    counts = train_set.label_counts()
    if np.any(counts == 0):
        raise ValidationError(f"class(es) {np.flatnonzero(counts == 0).tolist()} have no training bags")
    weights = class_weights_from_counts(counts)

    stream = RandomStream(train_config.seed)
    if train_config.mode == "images":
        if hidden is None:
            raise ValidationError("images mode needs an encoder hidden width")
        model = init_model(mil_config, stream, train_set.patch, hidden, train_config.head_init)
    else:
        model = init_model(mil_config, stream, head_init=train_config.head_init)
    model.check_dataset(train_set)
    model.check_dataset(val_set)

    state = AdamState()
    params = model.params()
    history = []
    best, best_ba, best_epoch = None, -math.inf, -1
    for epoch in range(train_config.epochs):
        order = stream.permutation(len(train_set))
        loss_sum = 0.0
        for i in order:
            bag = train_set.bags[i]
            loss, grads = loss_and_grads(model, bag.payload, bag.label, weights, train_config.i1_loss)
            loss_sum += loss
            adam_step(params, grads, state, train_config)
        val_ba = evaluate(model, val_set)["ba"]
        entry = {"epoch": epoch, "train_loss": loss_sum / len(train_set), "val_ba": val_ba}
        history.append(entry)
        log.info("epoch %d train_loss %.6f val_ba %.4f", epoch, entry["train_loss"], val_ba)
        if on_epoch is not None:
            on_epoch(entry)
        if val_ba > best_ba:
            best, best_ba, best_epoch = model.copy(), val_ba, epoch
    return FitResult(best, history, best_epoch, best_ba, last_model=model)


def evaluate(model: MilModel, dataset: Dataset) -> dict:
    """BA, per-class recalls and the confusion matrix. Parameters are not touched."""
    model.check_dataset(dataset)
    cm = ConfusionMatrix(model.config.label_count)
    for bag in dataset.bags:
        _, label = model.predict(bag.payload)
        cm.update(bag.label, label)
    return metrics_report(cm)


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(model: MilModel, path, seed=None, epoch=None, metadata=None):
    manifest, chunks, offset = [], [], 0
    for name, arr in model.params().items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        chunks.append(raw)
        offset += len(raw)
    enc = None
    if model.encoder is not None:
        enc = {"patch": model.encoder.patch, "hidden": model.encoder.hidden, "dim": model.encoder.dim}
    header = {"format": MAGIC.decode(), "mil_config": model.config.to_dict(), "encoder": enc,
              "params": manifest, "seed": seed, "epoch": epoch, "metadata": metadata or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a MILCKPT1 checkpoint")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise FormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc
    return header, blob[16 + hlen:]


def load_checkpoint(path):
    """Returns ``(model, header)``."""
    header, payload = read_checkpoint_header(path)
    for key in ("mil_config", "encoder", "params"):
        if key not in header:
            raise FormatError(f"{path}: header missing {key!r}")
    try:
        config = MilConfig(**header["mil_config"])
    except (TypeError, ValidationError) as exc:
        raise FormatError(f"{path}: bad mil_config ({exc})") from exc
    manifest = header["params"]
    expected = 0
    for entry in manifest:
        try:
            n = int(np.prod(entry["shape"], dtype=np.int64))
            if entry["offset"] != expected:
                raise FormatError(f"{path}: parameter {entry['name']} has offset {entry['offset']}, expected {expected}")
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed parameter manifest") from exc
        expected += 8 * n
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, manifest needs {expected}")
    arrays = {}
    for entry in manifest:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        flat = np.frombuffer(payload, dtype="<f8", count=n, offset=entry["offset"])
        arrays[entry["name"]] = flat.astype(np.float64).reshape(entry["shape"])
    try:
        head = HeadParams(arrays["head.W"], arrays["head.b"])
        encoder = None
        if header["encoder"] is not None:
            encoder = EncoderParams(arrays["encoder.W1"], arrays["encoder.b1"], arrays["encoder.W2"],
                                    arrays["encoder.b2"], int(header["encoder"]["patch"]))
        model = MilModel(config, head, encoder)
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint lacks parameter {exc}") from exc
    except ShapeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return model, header


def checkpoint_io(direction: str, path, model: MilModel = None, **kwargs):
    if direction == "save":
        return save_checkpoint(model, path, **kwargs)
    if direction == "load":
        return load_checkpoint(path)[0]
    raise ValidationError(f"direction must be 'save' or 'load', got {direction!r}")
