"""Dense float64 matrix engine with a reverse-mode tape.

Every value is a 2-D ``numpy.ndarray``. A :class:`Node` wraps one such
matrix together with a gradient buffer of the same shape and a closure that
pushes its gradient to its parents. Only the primitives needed by the model
are provided; there is no broadcasting beyond what each primitive documents.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "ShapeError",
    "GraphError",
    "constant",
    "parameter",
    "backward",
    "zero_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "concat_cols",
    "concat_rows",
    "row_mean",
    "sum_all",
    "gather_rows",
    "slice_rows",
    "softmax_rows",
    "masked_softmax_rows",
    "log_softmax_rows",
    "normalize_rows",
    "leaky_relu",
    "relu",
    "gelu",
    "sigmoid",
    "bce",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class GraphError(RuntimeError):
    """The computation graph cannot be differentiated as requested."""


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got array with {arr.ndim} dimensions")
    if arr.size == 0:
        raise ShapeError(f"empty matrix of shape {arr.shape}")
    return arr


class Node:
    """One matrix value on the tape."""

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "name", "_backward", "_filled")

    def __init__(
        self,
        value,
        op: str = "leaf",
        parents: tuple["Node", ...] = (),
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        self.value = value if op != "leaf" else _as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Callable[[], None] | None = None
        self._filled = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"


def constant(value, name: str | None = None) -> Node:
    return Node(value, name=name)


def parameter(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def _result(value: np.ndarray, op: str, parents: tuple[Node, ...]) -> Node:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return Node(value, op=op, parents=parents, requires_grad=any(p.requires_grad for p in parents))


def _topological(loss: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Node, int]] = [(loss, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            mark = state.get(key)
            if mark == 2:
                continue
            if mark == 1:
                raise GraphError("cycle detected in computation graph")
            state[key] = 1
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i]
            if not parent.requires_grad:
                continue
            mark = state.get(id(parent))
            if mark == 1:
                raise GraphError("cycle detected in computation graph")
            if mark is None:
                stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Node) -> dict[str, np.ndarray]:
    """Fill ``grad`` of every node reachable from a scalar ``loss``.

    Returns a table of gradients of the named leaf parameters that were
    reached. Calling this twice over the same leaves without
    :func:`zero_grad` in between raises :class:`GraphError`.
    """
    if loss.shape != (1, 1):
        raise GraphError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    order = _topological(loss)
    leaves = [n for n in order if n.op == "leaf" and n.requires_grad]
    if loss._filled or any(n._filled for n in leaves):
        raise GraphError("gradients already populated; call zero_grad before another backward")
    for node in order:
        if node.op != "leaf":
            node.grad = np.zeros_like(node.value)
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
        node._filled = True
    return {n.name: n.grad for n in leaves if n.name is not None}


def zero_grad(nodes: Iterable[Node]) -> None:
    for node in nodes:
        node.grad = np.zeros_like(node.value)
        node._filled = False


def _check_same(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = _result(a.value @ b.value, "matmul", (a, b))

    def _back() -> None:
        if a.requires_grad:
            a.grad += out.grad @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ out.grad

    out._backward = _back
    return out


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may also be a 1 x cols row added to every row of ``a``."""
    row_bias = b.shape[0] == 1 and a.shape[0] != 1 and a.shape[1] == b.shape[1]
    if not row_bias:
        _check_same(a, b, "add")
    out = _result(a.value + b.value, "add", (a, b))

    def _back() -> None:
        if a.requires_grad:
            a.grad += out.grad
        if b.requires_grad:
            b.grad += out.grad.sum(axis=0, keepdims=True) if row_bias else out.grad

    out._backward = _back
    return out


def sub(a: Node, b: Node) -> Node:
    _check_same(a, b, "sub")
    out = _result(a.value - b.value, "sub", (a, b))

    def _back() -> None:
        if a.requires_grad:
            a.grad += out.grad
        if b.requires_grad:
            b.grad -= out.grad

    out._backward = _back
    return out


def mul(a: Node, b: Node) -> Node:
    _check_same(a, b, "mul")
    out = _result(a.value * b.value, "mul", (a, b))

    def _back() -> None:
        if a.requires_grad:
            a.grad += out.grad * b.value
        if b.requires_grad:
            b.grad += out.grad * a.value

    out._backward = _back
    return out


def scale(x: Node, c: float) -> Node:
    c = float(c)
    out = _result(x.value * c, "scale", (x,))

    def _back() -> None:
        x.grad += out.grad * c

    out._backward = _back
    return out


def transpose(x: Node) -> Node:
    out = _result(x.value.T.copy(), "transpose", (x,))

    def _back() -> None:
        x.grad += out.grad.T

    out._backward = _back
    return out


def concat_cols(a: Node, b: Node) -> Node:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    split = a.shape[1]
    out = _result(np.concatenate([a.value, b.value], axis=1), "concat_cols", (a, b))

    def _back() -> None:
        if a.requires_grad:
            a.grad += out.grad[:, :split]
        if b.requires_grad:
            b.grad += out.grad[:, split:]

    out._backward = _back
    return out


def concat_rows(parts: Sequence[Node]) -> Node:
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeError(f"concat_rows: column counts differ, {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    out = _result(np.concatenate([p.value for p in parts], axis=0), "concat_rows", tuple(parts))

    def _back() -> None:
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p.grad += out.grad[lo:hi]

    out._backward = _back
    return out


def row_mean(x: Node) -> Node:
    """Mean across each row: n x m -> n x 1."""
    m = x.shape[1]
    out = _result(x.value.mean(axis=1, keepdims=True), "row_mean", (x,))

    def _back() -> None:
        x.grad += np.repeat(out.grad / m, m, axis=1)

    out._backward = _back
    return out


def sum_all(x: Node) -> Node:
    out = _result(np.array([[x.value.sum()]]), "sum_all", (x,))

    def _back() -> None:
        x.grad += out.grad[0, 0]

    out._backward = _back
    return out


def gather_rows(table: Node, index: Sequence[int]) -> Node:
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows: index must be a non-empty 1-D sequence")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ShapeError(f"gather_rows: index out of range for table {table.shape}")
    out = _result(table.value[idx], "gather_rows", (table,))

    def _back() -> None:
        np.add.at(table.grad, idx, out.grad)

    out._backward = _back
    return out


def slice_rows(x: Node, lo: int, hi: int) -> Node:
    if not 0 <= lo < hi <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{lo}, {hi}) out of range for {x.shape}")
    out = _result(x.value[lo:hi].copy(), "slice_rows", (x,))

    def _back() -> None:
        x.grad[lo:hi] += out.grad

    out._backward = _back
    return out


def _stable_softmax(v: np.ndarray) -> np.ndarray:
    shifted = np.exp(v - v.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def softmax_rows(x: Node) -> Node:
    y = _stable_softmax(x.value)
    out = _result(y, "softmax_rows", (x,))

    def _back() -> None:
        g = out.grad
        x.grad += y * (g - (g * y).sum(axis=1, keepdims=True))

    out._backward = _back
    return out


def masked_softmax_rows(x: Node, mask: np.ndarray) -> Node:
    """Row softmax restricted to entries where ``mask`` is true.

    Masked-out entries are exactly zero and receive no gradient. Every row
    must keep at least one entry.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_softmax_rows: mask {mask.shape} vs input {x.shape}")
    if not mask.any(axis=1).all():
        raise ShapeError("masked_softmax_rows: a row has no unmasked entry")
    v = np.where(mask, x.value, -np.inf)
    e = np.where(mask, np.exp(v - v.max(axis=1, keepdims=True)), 0.0)
    y = e / e.sum(axis=1, keepdims=True)
    out = _result(y, "masked_softmax_rows", (x,))

    def _back() -> None:
        g = out.grad
        x.grad += y * (g - (g * y).sum(axis=1, keepdims=True))

    out._backward = _back
    return out


def log_softmax_rows(x: Node) -> Node:
    v = x.value
    shifted = v - v.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    out = _result(y, "log_softmax_rows", (x,))

    def _back() -> None:
        g = out.grad
        x.grad += g - np.exp(y) * g.sum(axis=1, keepdims=True)

    out._backward = _back
    return out


def normalize_rows(x: Node) -> Node:
    """Scale every row to unit Euclidean length; zero rows are an error."""
    norms = np.sqrt((x.value ** 2).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise ZeroDivisionError("normalize_rows: zero-norm row")
    y = x.value / norms
    out = _result(y, "normalize_rows", (x,))

    def _back() -> None:
        g = out.grad
        x.grad += (g - y * (g * y).sum(axis=1, keepdims=True)) / norms

    out._backward = _back
    return out


def leaky_relu(x: Node, slope: float = 0.2) -> Node:
    """max(x, slope*x); the derivative at exactly 0 is taken as 1."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    factor = np.where(x.value >= 0.0, 1.0, slope)
    out = _result(x.value * factor, "leaky_relu", (x,))

    def _back() -> None:
        x.grad += out.grad * factor

    out._backward = _back
    return out


def relu(x: Node) -> Node:
    factor = (x.value > 0.0).astype(np.float64)
    out = _result(x.value * factor, "relu", (x,))

    def _back() -> None:
        x.grad += out.grad * factor

    out._backward = _back
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Node) -> Node:
    # tanh approximation
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = _result(0.5 * v * (1.0 + t), "gelu", (x,))

    def _back() -> None:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        x.grad += out.grad * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * d_inner)

    out._backward = _back
    return out


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Node) -> Node:
    y = _sigmoid(x.value)
    out = _result(y, "sigmoid", (x,))

    def _back() -> None:
        x.grad += out.grad * y * (1.0 - y)

    out._backward = _back
    return out


BCE_EPS = 1e-7


def bce(p: Node, y: float, eps: float = BCE_EPS) -> Node:
    """Binary cross-entropy of a 1x1 probability against label ``y``.

    ``p`` is clamped to [eps, 1 - eps]; inside the clamped region the
    gradient is zero.
    """
    if p.shape != (1, 1):
        raise ShapeError(f"bce expects a 1x1 probability, got {p.shape}")
    y = float(y)
    raw = p.value[0, 0]
    q = min(max(raw, eps), 1.0 - eps)
    loss = -(y * math.log(q) + (1.0 - y) * math.log1p(-q))
    out = _result(np.array([[loss]]), "bce", (p,))
    active = eps < raw < 1.0 - eps

    def _back() -> None:
        if active:
            p.grad += out.grad * (-(y / q) + (1.0 - y) / (1.0 - q))

    out._backward = _back
    return out
