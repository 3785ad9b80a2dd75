"""Toy patch encoder: image -> N*N patches -> shared two-layer MLP -> bag Z."""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor, matmul_bias, relu
from .errors import ShapeError, ValidationError
from .rng import RandomStream


@dataclass
class EncoderParams:
    W1: np.ndarray  # hidden x P*P
    b1: np.ndarray
    W2: np.ndarray  # dim x hidden
    b2: np.ndarray
    patch: int

    @property
    def hidden(self):
        return self.W1.shape[0]

    @property
    def dim(self):
        return self.W2.shape[0]

    def validate(self):
        p2 = self.patch * self.patch
        if self.W1.shape != (self.hidden, p2) or self.b1.shape != (self.hidden,):
            raise ShapeError(f"encoder layer 1 has shapes {self.W1.shape}/{self.b1.shape} for P={self.patch}")
        if self.W2.shape != (self.dim, self.hidden) or self.b2.shape != (self.dim,):
            raise ShapeError(f"encoder layer 2 has shapes {self.W2.shape}/{self.b2.shape}")


def patchify(image, patch: int) -> np.ndarray:
    """Split an H×W image into row-major P×P patches, one flattened patch per row."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"expected a 2-d grayscale image, got shape {image.shape}")
    H, W = image.shape
    if patch < 1 or H % patch or W % patch:
        raise ShapeError(f"image {H}x{W} is not divisible into {patch}x{patch} patches")
    gh, gw = H // patch, W // patch
    blocks = image.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3)
    return blocks.reshape(gh * gw, patch * patch).copy()


def unpatchify(patches, patch: int, height: int, width: int) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    gh, gw = height // patch, width // patch
    if patches.shape != (gh * gw, patch * patch):
        raise ShapeError(f"{patches.shape} patches do not tile a {height}x{width} image")
    blocks = patches.reshape(gh, gw, patch, patch).transpose(0, 2, 1, 3)
    return blocks.reshape(height, width).copy()


def encode_graph(patches: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    if patches.shape[1] != W1.shape[1]:
        raise ShapeError(f"patches have {patches.shape[1]} columns, encoder expects {W1.shape[1]}")
    hidden = relu(matmul_bias(W1, patches, b1))
    return matmul_bias(W2, hidden, b2)


def encode(patches, params: EncoderParams) -> np.ndarray:
    """Map each patch row through relu(W1 p + b1) then W2 (.) + b2."""
    g = Graph()
    p = patches if isinstance(patches, Tensor) else g.constant(patches)
    out = encode_graph(p, g.constant(params.W1), g.constant(params.b1),
                       g.constant(params.W2), g.constant(params.b2))
    return out.data


def kaiming_uniform(stream: RandomStream, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return stream.uniform(-bound, bound, fan_out * fan_in).reshape(fan_out, fan_in)


def init_encoder(patch: int, hidden: int, dim: int, stream: RandomStream) -> EncoderParams:
    if min(patch, hidden, dim) < 1:
        raise ValidationError(f"encoder dimensions must be positive: P={patch} D_h={hidden} D={dim}")
    W1 = kaiming_uniform(stream, hidden, patch * patch)
    W2 = kaiming_uniform(stream, dim, hidden)
    return EncoderParams(W1, np.zeros(hidden), W2, np.zeros(dim), patch)
