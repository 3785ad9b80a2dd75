"""A small tape-based reverse-mode autodiff engine over float64 numpy arrays.

A :class:`Graph` records every operation in call order. ``backward`` walks
the tape in exact reverse, so the tape order doubles as the topological order.

    g = Graph()
    w = g.leaf([[1.0, 2.0]])
    z = g.leaf([[3.0, 4.0]])
    b = g.leaf([1.0])
    out = matmul_bias(w, z, b)          # [[12.0]]
    grads = g.backward(reshape(out, ()))
"""

import math

import numpy as np

from . import _kernels
from .errors import NonFiniteError, ShapeError, ValidationError


class Tensor:
    """A value recorded on a graph. ``data`` is a float64 ndarray."""

    __slots__ = ("graph", "data", "grad", "parents", "backward_fn", "is_leaf", "name", "extra")

    def __init__(self, graph, data, parents=(), backward_fn=None, is_leaf=False, name=None):
        self.graph = graph
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.is_leaf = is_leaf
        self.name = name
        self.extra = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


class Graph:
    def __init__(self):
        self.nodes = []
        self.leaves = []

    def _push(self, t):
        self.nodes.append(t)
        return t

    def leaf(self, value, name=None) -> Tensor:
        """A differentiable input. The array is copied."""
        data = np.array(value, dtype=np.float64)
        t = Tensor(self, data, is_leaf=True, name=name)
        self.leaves.append(t)
        return self._push(t)

    def constant(self, value) -> Tensor:
        """A non-differentiable input."""
        return self._push(Tensor(self, np.array(value, dtype=np.float64)))

    def record(self, data, parents, backward_fn, name=None) -> Tensor:
        """Record a new op. ``backward_fn(grad_out)`` returns one gradient
        (or None) per parent, in the same order as ``parents``."""
        for p in parents:
            if p.graph is not self:
                raise ValidationError("operands belong to different graphs")
        return self._push(Tensor(self, data, tuple(parents), backward_fn, name=name))

    def backward(self, output: Tensor):
        """Accumulate d(output)/d(node) into ``node.grad`` for every node.

        Returns the leaf gradients in creation order. Leaves the output does
        not depend on get zeros.
        """
        if output.graph is not self:
            raise ValidationError("output belongs to a different graph")
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        for node in self.nodes:
            node.grad = None
        output.grad = np.ones_like(output.data)
        stop = self.nodes.index(output) if self.nodes[-1] is not output else len(self.nodes) - 1
        for node in reversed(self.nodes[: stop + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            local = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, local):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + g
        for leaf in self.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        return [leaf.grad for leaf in self.leaves]


def _operand(a, like: Tensor):
    if isinstance(a, Tensor):
        return a
    return like.graph.constant(a)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _operand(b, a)
    _same_shape(a, b, "add")
    return a.graph.record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    _same_shape(a, b, "sub")
    return a.graph.record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    b = _operand(b, a)
    _same_shape(a, b, "mul")
    return a.graph.record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.graph.record(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return a.graph.record(-a.data, (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValidationError("log of a non-positive value")
    return a.graph.record(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= a <= hi."""
    inside = (a.data >= lo) & (a.data <= hi)
    return a.graph.record(np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return x.graph.record(np.where(mask, x.data, 0.0), (x,), lambda g: (np.where(mask, g, 0.0),))


def relu_grad_mask(x) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) > 0.0).astype(np.float64)


def sigmoid_values(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    out = np.empty_like(flat)
    pos = flat >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ez = np.exp(flat[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.reshape(x.shape)


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_values(x.data)
    return x.graph.record(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax_values(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    e = np.exp(rows - rows.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {x.shape}")
    if x.shape[1] < 2:
        raise ShapeError("softmax_rows needs at least 2 columns")
    s = softmax_values(x.data)

    def back(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return x.graph.record(s, (x,), back)


# -- structural ---------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return x.graph.record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def take(x: Tensor, index) -> Tensor:
    """Pick a single entry of ``x`` as a scalar (shape ``()``) tensor."""
    index = tuple(np.atleast_1d(index)) if not isinstance(index, tuple) else index

    def back(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return x.graph.record(np.array(x.data[index]), (x,), back)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, accumulated left to right in row-major order."""
    flat = x.data.ravel()
    s = float(np.cumsum(flat)[-1]) if flat.size else 0.0
    return x.graph.record(np.array(s), (x,), lambda g: (np.full(x.shape, float(g)),))


# -- linear algebra and pooling -------------------------------------------------


def matmul_bias(W: Tensor, Z: Tensor, b: Tensor) -> Tensor:
    """Rows of ``Z @ W.T + b``: row j is ``W . z_j + b``. Shapes C×D, M×D, (C,)."""
    if W.data.ndim != 2 or Z.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(f"matmul_bias: bad ranks W{W.shape} Z{Z.shape} b{b.shape}")
    C, D = W.shape
    if Z.shape[1] != D:
        raise ShapeError(f"matmul_bias: W is {C}x{D} but Z has {Z.shape[1]} columns")
    if b.shape[0] != C:
        raise ShapeError(f"matmul_bias: bias length {b.shape[0]} != {C}")
    out = _kernels.matmul_acc(Z.data, W.data.T) + b.data

    def back(g):
        gW = _kernels.matmul_acc(g.T, Z.data)
        gZ = _kernels.matmul_acc(g, W.data)
        gb = np.cumsum(g, axis=0)[-1]
        return gW, gZ, gb

    return W.graph.record(out, (W, Z, b), back)


def topk_mean_columns(x: Tensor, k: int) -> Tensor:
    """Per-column mean of the ``k`` largest entries.

    Selection is by value descending, ties to the lower row index. The chosen
    rows are kept on ``out.extra`` as a k×C index array (row order when
    ``k`` equals the row count). The subgradient sends ``1/k`` to each
    selected entry and nothing elsewhere.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"topk_mean_columns needs a matrix, got shape {x.shape}")
    m = x.shape[0]
    k = int(k)
    if not 1 <= k <= m:
        raise ValidationError(f"k={k} out of range [1, {m}]")
    values, sel = _kernels.topk_select(x.data, k)
    cols = np.arange(x.shape[1])

    def back(g):
        out = np.zeros_like(x.data)
        share = g / k
        for i in range(k):
            out[sel[i], cols] += share
        return (out,)

    out = x.graph.record(values, (x,), back)
    out.extra = sel
    return out


# -- gradient checking ------------------------------------------------------------


def grad_check(f, params, h=1e-5):
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f(graph, *leaves)`` must return a scalar Tensor recorded on ``graph``;
    ``params`` is a sequence of arrays. Returns
    ``max |analytic - numeric| / max(1, |numeric|)`` over every entry.
    """
    params = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(values):
        g = Graph()
        leaves = [g.leaf(v) for v in values]
        out = f(g, *leaves)
        val = float(out.data)
        if not math.isfinite(val):
            raise NonFiniteError("grad_check: non-finite function value")
        return g, out, val

    g, out, _ = evaluate(params)
    analytic = g.backward(out)
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = evaluate(params)[2]
            flat[idx] = orig - h
            fm = evaluate(params)[2]
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[pi].ravel()[idx]
            if not math.isfinite(a):
                raise NonFiniteError("grad_check: non-finite analytic gradient")
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
