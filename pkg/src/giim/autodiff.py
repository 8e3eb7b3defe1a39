"""Dense float64 tensors with a reverse-mode tape.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the upstream gradient to parent gradients. The tape is
whatever graph of tensors the last forward pass built; nothing is mutated in
place after recording, so a fresh forward pass is a fresh tape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, SingularityError

__all__ = [
    "Tensor",
    "as_tensor",
    "parameter",
    "matmul",
    "add",
    "mul",
    "relu",
    "concat",
    "vstack",
    "mean_rows",
    "row_mean",
    "gather_rows",
    "neighbor_mean",
    "tensor_sum",
    "softmax_cross_entropy",
    "frobenius_normalize",
    "backward",
]


class Tensor:
    """A dense array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple = (),
        backward_fn: Optional[Callable] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _result(data, op, parents, backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        op=op,
        parents=parents if needs else (),
        backward_fn=backward_fn if needs else None,
    )


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # only row broadcasting (1×c against n×c) and scalars occur here
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


# OpenBLAS uses a different kernel for very narrow outputs whose per-row
# results depend on the row's position; einsum keeps rows independent.
_NARROW = 8


def _product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.shape[1] < _NARROW:
        return np.einsum("ij,jk->ik", a, b, optimize=False)
    return a @ b


def matmul(a, b) -> Tensor:
    """Matrix product. Each output row depends only on the matching row of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(_product(a.data, b.data), "matmul", (a, b), back)


def add(a, b) -> Tensor:
    """Elementwise sum; a 1×c operand broadcasts over the rows of an n×c one."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    if out.shape not in (a.shape, b.shape):
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, "add", (a, b), back)


def mul(a, b) -> Tensor:
    """Elementwise product. ``b`` may be a Python scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        k = float(b)
        return _result(a.data * k, "scale", (a,), lambda g: (g * k,))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def back(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _result(a.data * b.data, "mul", (a, b), back)


def _relu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return upstream * (x > 0)


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.maximum(x.data, 0.0), "relu", (x,), lambda g: (_relu_grad(x.data, g),))


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    """Join tensors side by side (``axis=1``) or on top of each other (``axis=0``)."""
    if len(parts) == 0:
        raise ValueError("concat needs at least one tensor")
    parts = [as_tensor(p) for p in parts]
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise DimensionError(f"concat along axis {axis}: shapes {[p.shape for p in parts]} disagree")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        if axis == 1:
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[bounds[i]:bounds[i + 1], :] for i in range(len(parts)))

    out = np.concatenate([p.data for p in parts], axis=axis)
    return _result(out, "concat", tuple(parts), back)


def vstack(rows: Sequence) -> Tensor:
    return concat(rows, axis=0)


def row_mean(x) -> Tensor:
    """Mean over the rows of an n×c tensor, giving 1×c."""
    x = as_tensor(x)
    n = x.shape[0]
    if n == 0:
        raise ValueError("row_mean of an empty tensor; use mean_rows with a width")

    def back(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(x.data.mean(axis=0, keepdims=True), "row_mean", (x,), back)


def mean_rows(rows: Sequence, width: Optional[int] = None) -> Tensor:
    """Elementwise mean of a list of 1×c row vectors.

    The mean of an empty list is the zero vector of ``width``.
    """
    if len(rows) == 0:
        if width is None:
            raise ValueError("mean over an empty list needs an explicit width")
        return Tensor(np.zeros((1, width)))
    rows = [as_tensor(r) for r in rows]
    widths = {r.shape[1] for r in rows}
    if len(widths) != 1 or any(r.shape[0] != 1 for r in rows):
        raise DimensionError(f"mean_rows: mixed shapes {[r.shape for r in rows]}")
    if width is not None and widths != {width}:
        raise DimensionError(f"mean_rows: rows have width {widths.pop()}, expected {width}")
    return row_mean(vstack(rows))


def gather_rows(x, index: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], "gather", (x,), back)


def neighbor_mean(x, index: np.ndarray, counts: np.ndarray) -> Tensor:
    """Row ``i`` = mean of ``x[index[i, :counts[i]]]`` (zeros when ``counts[i] == 0``).

    ``index`` is n×k; slots past ``counts[i]`` are ignored. Each column is
    sorted before summing, so the result depends only on the multiset of
    neighbour rows, not on their order.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    counts = np.asarray(counts, dtype=np.intp)
    n, k = index.shape
    d = x.shape[1]
    padded = np.vstack([x.data, np.zeros((1, d))])
    slots = np.where(np.arange(k) < counts[:, None], index, x.shape[0])
    gathered = np.sort(padded[slots], axis=1)
    scale = 1.0 / np.maximum(counts, 1)[:, None]
    out = gathered.sum(axis=1) * scale

    def back(g):
        grad = np.zeros_like(x.data)
        live = np.arange(k) < counts[:, None]
        rows = np.broadcast_to((g * scale)[:, None, :], (n, k, d))[live]
        np.add.at(grad, index[live], rows)
        return (grad,)

    return _result(out, "neighbor_mean", (x,), back)


def tensor_sum(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.sum().reshape(1, 1), "sum", (x,), lambda g: (np.full(x.shape, g.item()),))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(row)[label]`` over the rows of a T×C logit matrix.

    ``labels`` is one class index per row (a bare int is accepted for T=1).
    """
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    t, c = logits.shape
    if labels.shape != (t,):
        raise DimensionError(f"{t} logit rows but {labels.size} labels")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range [0, {c}): {labels.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(t)
    loss = -log_p[rows, labels].mean()

    def back(g):
        grad = np.exp(log_p)
        grad[rows, labels] -= 1.0
        return (grad * (g.item() / t),)

    return _result(np.array([[loss]]), "softmax_xent", (logits,), back)


def frobenius_normalize(x) -> Tensor:
    x = as_tensor(x)
    norm = float(np.sqrt(np.sum(x.data * x.data)))
    if norm == 0.0:
        raise SingularityError("cannot normalise a zero tensor")
    y = x.data / norm

    def back(g):
        return ((g - y * np.sum(g * y)) / norm,)

    return _result(y, "frob_normalize", (x,), back)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict:
    """Back-propagate from a scalar ``loss``.

    Sets ``.grad`` on every tensor of the tape that requires a gradient and
    returns ``{param: grad}`` for ``params`` (default: every leaf reached).
    Parameters the loss does not depend on get a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    # A fresh pass starts every accumulator from zero. Accumulators are
    # allocated lazily: the first contribution is stored as-is (it may be a
    # view of another gradient), so later ones must never add in place.
    for node in order:
        node.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    for node in order:
        if node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.data)
    if params is None:
        params = [n for n in order if n.is_leaf and n.requires_grad]
    on_tape = {id(n) for n in order}
    out = {}
    for p in params:
        if id(p) not in on_tape or p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[p] = p.grad
    return out
