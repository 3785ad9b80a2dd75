"""Synthetic MIL datasets with ground-truth key instances, on-disk format, splits.

Draw order for ``gen_embedding_bags`` (bag ``i`` has label ``i % n_classes``):

1. key count ``m = stream.integer(key_min, key_max)``
2. a full Fisher-Yates permutation of ``range(M)``; the first ``m`` entries
   (sorted) are the key positions
3. ``M * D`` normals, row-major; key rows become ``mu_c + noise_sigma * n``,
   the others ``background_sigma * n``

``gen_image_bags`` uses the same steps 1-2, then ``H * W`` normals for the
whole image; background pixels are ``0.5 + background_sigma * n`` and key
patches ``template_c + noise_sigma * n``. Pixels are clipped to [0, 1] and
quantised to multiples of 1/255 so that the PGM payloads round-trip exactly.
"""

import json
import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import FormatError, ValidationError
from .metrics import format_float
from .rng import RandomStream

MANIFEST_VERSION = 1


@dataclass
class SyntheticSpec:
    mode: str = "embeddings"
    n_classes: int = 3
    dim: int = 16
    patch: int = 4
    grid: int = 7
    bags: int = 600
    key_min: int = 3
    key_max: int = 8
    separation: float = 6.0
    noise_sigma: float = 1.0
    background_sigma: float = 1.0
    seed: int = 0
    # embeddings mode: M = grid * grid instances per bag
    instances: int = field(init=False, default=0)

    def __post_init__(self):
        self.instances = self.grid * self.grid
        self.validate()

    def validate(self):
        if self.mode not in ("embeddings", "images"):
            raise ValidationError(f"mode must be 'embeddings' or 'images', got {self.mode!r}")
        if self.n_classes < 2:
            raise ValidationError("n_classes must be at least 2")
        if self.grid < 1 or self.bags < 1 or self.dim < 1 or self.patch < 1:
            raise ValidationError("grid, bags, dim and patch must be positive")
        if not 1 <= self.key_min <= self.key_max <= self.instances:
            raise ValidationError(
                f"need 1 <= key_min <= key_max <= M, got {self.key_min}, {self.key_max}, M={self.instances}")
        if not self.separation > 0:
            raise ValidationError("separation must be positive")
        if not (self.noise_sigma >= 0 and self.background_sigma > 0):
            raise ValidationError("noise_sigma must be >= 0 and background_sigma > 0")
        if self.mode == "embeddings" and self.n_classes > self.dim + 1:
            raise ValidationError(f"cannot place {self.n_classes} equidistant prototypes in R^{self.dim}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls) if f.init}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown synthetic-data key: {unknown[0]}")
        return cls(**d)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.init}


@dataclass
class BagRecord:
    id: str
    label: int
    payload: np.ndarray  # M×D embeddings or H×W image
    key_mask: np.ndarray  # (M,) bool


@dataclass
class Dataset:
    mode: str
    n_classes: int
    bags: list
    dim: int = None      # embeddings
    patch: int = None    # images
    grid: int = None     # images

    def __len__(self):
        return len(self.bags)

    @property
    def instances(self):
        if self.mode == "images":
            return self.grid * self.grid
        return self.bags[0].payload.shape[0] if self.bags else 0

    def label_counts(self):
        counts = np.zeros(self.n_classes, dtype=np.int64)
        for bag in self.bags:
            counts[bag.label] += 1
        return counts

    def subset(self, indices):
        return replace(self, bags=[self.bags[i] for i in indices])


def prototypes(n_classes: int, dim: int, separation: float) -> np.ndarray:
    """Mutually equidistant class centres, pairwise distance ``separation``."""
    if n_classes > dim + 1:
        raise ValidationError(f"cannot place {n_classes} equidistant prototypes in R^{dim}")
    a = separation / math.sqrt(2.0)
    mu = np.zeros((n_classes, dim))
    for c in range(min(n_classes, dim)):
        mu[c, c] = a
    if n_classes == dim + 1:
        t = (1.0 - math.sqrt(1.0 + dim)) / dim
        mu[dim, :] = a * t
    return mu


def class_template(c: int, n_classes: int, patch: int) -> np.ndarray:
    """Intensity ramp across the patch, oriented at angle 2*pi*c/n_classes, spanning [0, 1].

    Values are multiples of 1/255, like every stored pixel.
    """
    theta = 2.0 * math.pi * c / n_classes
    ys, xs = np.mgrid[0:patch, 0:patch].astype(np.float64)
    ramp = xs * math.cos(theta) + ys * math.sin(theta)
    lo, hi = ramp.min(), ramp.max()
    if hi - lo < 1e-12:
        return np.full((patch, patch), 128.0 / 255.0)
    return np.round((ramp - lo) / (hi - lo) * 255.0) / 255.0


def _key_positions(stream: RandomStream, spec: SyntheticSpec) -> np.ndarray:
    m = stream.integer(spec.key_min, spec.key_max)
    perm = stream.permutation(spec.instances)
    mask = np.zeros(spec.instances, dtype=bool)
    mask[perm[:m]] = True
    return mask


def gen_embedding_bags(spec: SyntheticSpec, stream: RandomStream = None) -> Dataset:
    if spec.mode != "embeddings":
        raise ValidationError("gen_embedding_bags needs mode='embeddings'")
    spec.validate()
    stream = stream or RandomStream(spec.seed)
    mu = prototypes(spec.n_classes, spec.dim, spec.separation)
    M, D = spec.instances, spec.dim
    bags = []
    for i in range(spec.bags):
        label = i % spec.n_classes
        mask = _key_positions(stream, spec)
        noise = stream.normal(M * D).reshape(M, D)
        Z = np.where(mask[:, None], mu[label] + spec.noise_sigma * noise, spec.background_sigma * noise)
        bags.append(BagRecord(f"bag{i:05d}", label, Z, mask))
    return Dataset("embeddings", spec.n_classes, bags, dim=D)


def gen_image_bags(spec: SyntheticSpec, stream: RandomStream = None) -> Dataset:
    if spec.mode != "images":
        raise ValidationError("gen_image_bags needs mode='images'")
    spec.validate()
    stream = stream or RandomStream(spec.seed)
    P, N = spec.patch, spec.grid
    side = P * N
    templates = [class_template(c, spec.n_classes, P) for c in range(spec.n_classes)]
    bags = []
    for i in range(spec.bags):
        label = i % spec.n_classes
        mask = _key_positions(stream, spec)
        noise = stream.normal(side * side).reshape(side, side)
        img = 0.5 + spec.background_sigma * noise
        for j in np.flatnonzero(mask):
            r, c = divmod(int(j), N)
            block = (slice(r * P, (r + 1) * P), slice(c * P, (c + 1) * P))
            img[block] = templates[label] + spec.noise_sigma * noise[block]
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        bags.append(BagRecord(f"bag{i:05d}", label, img, mask))
    return Dataset("images", spec.n_classes, bags, patch=P, grid=N)


def generate(spec: SyntheticSpec, stream: RandomStream = None) -> Dataset:
    if spec.mode == "embeddings":
        return gen_embedding_bags(spec, stream)
    return gen_image_bags(spec, stream)


# -- PGM / CSV payloads -------------------------------------------------------------


def write_pgm(path, values255: np.ndarray):
    """ASCII P2, maxval 255, one image row per line."""
    arr = np.asarray(values255)
    h, w = arr.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in arr]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    """Return the raw integer pixels of an ASCII P2 file."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: cannot read PGM ({exc})") from exc
    tokens = []
    for line in text.splitlines():
        tokens += line.split("#", 1)[0].split()
    if len(tokens) < 4 or tokens[0] != "P2":
        raise FormatError(f"{path}: not an ASCII PGM (P2) file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        pixels = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM ({exc})") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    if pixels.size != w * h or np.any(pixels < 0) or np.any(pixels > maxval):
        raise FormatError(f"{path}: expected {w * h} pixels in [0, 255], got {pixels.size}")
    return pixels.reshape(h, w)


def load_pgm_image(path) -> np.ndarray:
    return read_pgm(path) / 255.0


def write_csv_matrix(path, matrix):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in np.asarray(matrix, dtype=np.float64):
            fh.write(",".join(format_float(v) for v in row) + "\n")


def read_csv_matrix(path) -> np.ndarray:
    try:
        with open(path, "r", encoding="ascii") as fh:
            rows = [line.strip() for line in fh if line.strip()]
        return np.array([[float(v) for v in row.split(",")] for row in rows], dtype=np.float64)
    except (OSError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: cannot parse CSV ({exc})") from exc


# -- dataset directory ------------------------------------------------------------


def save_dataset(dataset: Dataset, path):
    os.makedirs(path, exist_ok=True)
    entries = []
    for bag in dataset.bags:
        if dataset.mode == "embeddings":
            fname = f"{bag.id}.csv"
            write_csv_matrix(os.path.join(path, fname), bag.payload)
        else:
            fname = f"{bag.id}.pgm"
            write_pgm(os.path.join(path, fname), np.round(bag.payload * 255.0).astype(np.int64))
        entries.append({"id": bag.id, "label": int(bag.label), "file": fname,
                        "key_mask": [int(v) for v in bag.key_mask]})
    manifest = {"version": MANIFEST_VERSION, "mode": dataset.mode, "n_classes": dataset.n_classes}
    if dataset.mode == "embeddings":
        manifest["dim"] = dataset.dim
    else:
        manifest["patch"] = dataset.patch
        manifest["grid"] = dataset.grid
    # one bag per line keeps the file diffable
    head = ",\n".join(f" {json.dumps(k)}: {json.dumps(v)}" for k, v in manifest.items())
    body = ",\n".join("  " + json.dumps(e, separators=(",", ":")) for e in entries)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write("{\n" + head + ',\n "bags": [\n' + body + "\n ]\n}\n")


def _require(manifest, key, kind):
    if key not in manifest or not isinstance(manifest[key], kind) or isinstance(manifest[key], bool):
        raise FormatError(f"manifest field {key!r} missing or not {kind.__name__}")
    return manifest[key]


def load_dataset(path) -> Dataset:
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"{mpath}: no manifest") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{mpath}: unreadable manifest ({exc})") from exc
    version = manifest.get("version")
    if version != MANIFEST_VERSION:
        raise FormatError(f"unsupported dataset manifest version {version!r} (expected {MANIFEST_VERSION})")
    mode = manifest.get("mode")
    if mode not in ("embeddings", "images"):
        raise FormatError(f"manifest mode {mode!r} not recognised")
    n_classes = _require(manifest, "n_classes", int)
    if n_classes < 2:
        raise FormatError("manifest n_classes must be >= 2")
    if mode == "embeddings":
        dim = _require(manifest, "dim", int)
    else:
        patch = _require(manifest, "patch", int)
        grid = _require(manifest, "grid", int)
    bags = []
    n_inst = None
    for entry in _require(manifest, "bags", list):
        try:
            bag_id, label, fname = str(entry["id"]), entry["label"], str(entry["file"])
            mask = np.array(entry["key_mask"], dtype=bool)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed bag entry {entry!r}") from exc
        if not isinstance(label, int) or not 0 <= label < n_classes:
            raise FormatError(f"bag {bag_id}: label {label!r} out of range [0, {n_classes})")
        fpath = os.path.join(path, fname)
        if not os.path.isfile(fpath):
            raise FormatError(f"bag {bag_id}: payload {fname} missing")
        if mode == "embeddings":
            payload = read_csv_matrix(fpath)
            if payload.ndim != 2 or payload.shape[1] != dim:
                raise FormatError(f"bag {bag_id}: payload has shape {payload.shape}, manifest says D={dim}")
            n_inst = payload.shape[0] if n_inst is None else n_inst
            if payload.shape[0] != n_inst:
                raise FormatError(f"bag {bag_id}: {payload.shape[0]} instances, expected {n_inst}")
        else:
            payload = load_pgm_image(fpath)
            side = patch * grid
            if payload.shape != (side, side):
                raise FormatError(f"bag {bag_id}: image is {payload.shape}, manifest says {side}x{side}")
        if mask.shape != (payload.shape[0] if mode == "embeddings" else grid * grid,):
            raise FormatError(f"bag {bag_id}: key_mask length {mask.size} does not match the payload")
        bags.append(BagRecord(bag_id, label, payload, mask))
    if mode == "embeddings":
        return Dataset(mode, n_classes, bags, dim=dim)
    return Dataset(mode, n_classes, bags, patch=patch, grid=grid)


def dataset_io(direction: str, path, dataset: Dataset = None):
    if direction == "save":
        return save_dataset(dataset, path)
    if direction == "load":
        return load_dataset(path)
    raise ValidationError(f"direction must be 'save' or 'load', got {direction!r}")


def split(dataset: Dataset, train_fraction: float, stream: RandomStream):
    """Stratified shuffle split. Per class, ``floor(f * n_c)`` bags go to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    train_idx, val_idx = [], []
    for c in range(dataset.n_classes):
        members = [i for i, bag in enumerate(dataset.bags) if bag.label == c]
        if len(members) < 2:
            raise ValidationError(f"class {c} has {len(members)} bag(s); a split needs at least 2")
        stream.shuffle(members)
        n_train = math.floor(train_fraction * len(members))
        train_idx += members[:n_train]
        val_idx += members[n_train:]
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(val_idx))
