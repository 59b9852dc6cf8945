"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Node` wraps an immutable numpy array (the tensor value) together
with the parents it was computed from and a vector-Jacobian-product callback.
Calling :func:`backward` on a scalar node walks the graph in reverse
topological order and accumulates gradients into ``Node.grad``.

Broadcasting is limited to scalar/tensor pairs (a 0-d operand against any
shape).  Row-wise bias addition is provided explicitly by :func:`linear` and
:func:`add_rowwise`.  ReLU uses the subgradient 0 at the origin.
"""

from __future__ import annotations

import builtins
import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "Node",
    "parameter",
    "constant",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "custom_node",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "add_rowwise",
    "grouped_linear",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "square",
    "clip",
    "sum",
    "mean",
    "concat",
    "stack",
    "slice",
    "reshape",
    "transpose",
    "detach",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ContractError(ValueError):
    """A precondition of the autodiff API was violated."""


_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Build values only; nodes created inside carry no parents."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("value", "parents", "backward_fn", "grad", "requires_grad", "op")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn=None,
                 requires_grad: bool = False, op: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        # leaves that require grad start from zero so untouched parameters
        # report a zero gradient rather than None
        self.grad = np.zeros_like(self.value) if (requires_grad and not parents) else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        tag = f", op={self.op!r}" if self.op else ""
        return f"Node(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice(self, index)

    @property
    def T(self):
        return transpose(self)


def parameter(data) -> Node:
    """A trainable leaf."""
    return Node(np.array(data, dtype=np.float64), requires_grad=True, op="param")


def constant(data) -> Node:
    return Node(np.array(data, dtype=np.float64), op="const")


def detach(x) -> Node:
    return constant(_as_node(x).value)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents: Sequence[Node], vjp: Callable, op: str) -> Node:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, parents, vjp, requires_grad=True, op=op)
    return Node(value, op=op)


def custom_node(value, parents: Sequence[Node], backward_fn: Callable) -> Node:
    """Register an externally computed value with a user-supplied VJP.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent;
    the count is checked during :func:`backward`.
    """
    parents = [_as_node(p) for p in parents]
    if not callable(backward_fn):
        raise ContractError("custom_node: backward_fn must be callable")
    return _make(np.asarray(value, dtype=np.float64), parents, backward_fn, "custom")


def _topo_order(root: Node) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if not isinstance(loss, Node):
        raise ContractError("backward: loss must be a Node")
    if loss.value.size != 1:
        raise ContractError(f"backward: loss must be scalar-shaped, got {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            # only leaves retain gradients
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node.backward_fn(g)
        if pgrads is None or len(pgrads) != len(node.parents):
            n_got = None if pgrads is None else len(pgrads)
            raise ContractError(
                f"backward_fn of op {node.op!r} returned {n_got} gradients "
                f"for {len(node.parents)} parents")
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != p.value.shape:
                raise ContractError(
                    f"backward_fn of op {node.op!r} returned gradient of shape "
                    f"{pg.shape} for parent of shape {p.value.shape}")
            key = id(p)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------- elementwise

def _pair(a, b, op):
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def _unbroadcast(g, shape):
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Node:
    a, b = _pair(a, b, "add")
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = _pair(a, b, "sub")
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = _pair(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def div(a, b) -> Node:
    a, b = _pair(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape),
                            _unbroadcast(-g * out / bv, b.shape)), "div")


def neg(a) -> Node:
    a = _as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0.0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Node:
    a = _as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Node:
    a = _as_node(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Node:
    a = _as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = _as_node(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def square(a) -> Node:
    a = _as_node(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient passes where lo <= a <= hi."""
    a = _as_node(a)
    av = a.value
    mask = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * mask,), "clip")


# ----------------------------------------------------------------- reductions

def sum(a, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    a = _as_node(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.value.sum(axis=axis), (a,), vjp, "sum")


def mean(a, axis=None) -> Node:
    a = _as_node(a)
    n = a.size if axis is None else a.shape[axis]
    return div(sum(a, axis=axis), float(n))


# --------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _make(av @ bv, (a, b), vjp, "matmul")


def add_rowwise(x, b) -> Node:
    """x (..., m) + b (m,) broadcast over leading axes."""
    x, b = _as_node(x), _as_node(b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("add_rowwise", x.shape, b.shape)
    lead = tuple(range(x.ndim - 1))
    return _make(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=lead)), "add_rowwise")


def linear(x, W, b=None) -> Node:
    """Affine map x @ W + b for x of shape (batch, n) or (n,)."""
    x, W = _as_node(x), _as_node(W)
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[0]:
        raise ShapeError("linear", x.shape, W.shape)
    if b is None:
        return matmul(x, W)
    b = _as_node(b)
    if b.shape != (W.shape[1],):
        raise ShapeError("linear", W.shape, b.shape)
    xv, Wv = x.value, W.value

    def vjp(g):
        if xv.ndim == 1:
            return g @ Wv.T, np.outer(xv, g), g
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return _make(xv @ Wv + b.value, (x, W, b), vjp, "linear")


def grouped_linear(x, W, b) -> Node:
    """Independent affine maps per group: x (G, B, n), W (G, n, m), b (G, m)."""
    x, W, b = _as_node(x), _as_node(W), _as_node(b)
    if (x.ndim != 3 or W.ndim != 3 or b.ndim != 2 or x.shape[0] != W.shape[0]
            or x.shape[2] != W.shape[1] or b.shape != (W.shape[0], W.shape[2])):
        raise ShapeError("grouped_linear", x.shape, W.shape, b.shape)
    xv, Wv = x.value, W.value
    out = np.matmul(xv, Wv) + b.value[:, None, :]

    def vjp(g):
        return (np.matmul(g, Wv.transpose(0, 2, 1)),
                np.matmul(xv.transpose(0, 2, 1), g),
                g.sum(axis=1))

    return _make(out, (x, W, b), vjp, "grouped_linear")


# -------------------------------------------------------------------- structure

def concat(nodes: Iterable, axis: int = 0) -> Node:
    nodes = [_as_node(n) for n in nodes]
    if not nodes:
        raise ContractError("concat: empty input")
    ref = list(nodes[0].shape)
    ax = axis % nodes[0].ndim
    for n in nodes[1:]:
        s = list(n.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", nodes[0].shape, n.shape)
    sizes = [n.shape[ax] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([n.value for n in nodes], axis=ax)
    return _make(out, nodes, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(nodes: Iterable, axis: int = 0) -> Node:
    nodes = [_as_node(n) for n in nodes]
    for n in nodes[1:]:
        if n.shape != nodes[0].shape:
            raise ShapeError("stack", nodes[0].shape, n.shape)
    out = np.stack([n.value for n in nodes], axis=axis)
    count = len(nodes)
    return _make(out, nodes,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(count)), "stack")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, builtins.slice, type(Ellipsis), type(None)))
               for i in items)


def slice(a, index) -> Node:  # noqa: A001
    a = _as_node(a)
    shape = a.shape
    try:
        out = a.value[index]
    except IndexError as exc:
        raise ShapeError("slice", shape, np.shape(index)) from exc
    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), vjp, "slice")


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", old, shape) from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Node:
    a = _as_node(a)
    out = np.transpose(a.value, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")
