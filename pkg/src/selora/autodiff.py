"""Minimal tape-based reverse-mode differentiation over 2-D float64 matrices.

Every value is a dense ``numpy`` array of shape ``(rows, cols)``. Operations
executed while a :class:`Tape` is active are recorded on it when at least one
input requires gradients; outside a tape they just compute values, which is
what evaluation code uses.

    with Tape() as tape:
        loss = mse_loss(matmul(x, w), y)
    backward(loss)          # accumulates into w.grad
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def as_matrix(data, copy: bool = True) -> np.ndarray:
    """Coerce ``data`` to a 2-D float64 array (scalars become 1x1)."""
    arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {arr.shape}")
    return arr


class Parameter:
    """Named matrix with a gradient accumulator of identical shape."""

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def resize(self, new_value) -> None:
        """Replace the value with a larger one; old grad entries are kept, new ones are zero."""
        new_value = as_matrix(new_value)
        grad = np.zeros_like(new_value)
        r, c = self.grad.shape
        grad[: min(r, grad.shape[0]), : min(c, grad.shape[1])] = self.grad[: grad.shape[0], : grad.shape[1]]
        self.value = new_value
        self.grad = grad

    def __repr__(self) -> str:
        flag = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {flag})"


class Var:
    """A node of the computation: a value plus how to push gradients to its parents."""

    __slots__ = ("value", "parents", "backward_fn", "param", "requires_grad", "tape")

    def __init__(self, value: np.ndarray, parents=(), backward_fn=None, requires_grad=False, param=None):
        self.value = value
        self.parents: tuple[Var, ...] = parents
        self.backward_fn: Callable | None = backward_fn
        self.requires_grad = requires_grad
        self.param: Parameter | None = param
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value[0, 0])

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of the operations of one forward pass."""

    _stack: list[Tape] = []

    def __init__(self):
        self.nodes: list[Var] = []
        self._leaves: dict[int, Var] = {}

    def __enter__(self) -> Tape:
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def active(cls) -> Tape | None:
        return cls._stack[-1] if cls._stack else None

    def record(self, node: Var) -> Var:
        node.tape = self
        self.nodes.append(node)
        return node

    def leaf(self, param: Parameter) -> Var:
        # one leaf per parameter per tape, so repeated uses accumulate into it
        node = self._leaves.get(id(param))
        if node is None:
            node = Var(param.value, requires_grad=param.trainable, param=param)
            if param.trainable:
                self.record(node)
            self._leaves[id(param)] = node
        return node

    def gradients(self, loss: Var) -> dict[int, np.ndarray]:
        """Adjoint of every recorded node w.r.t. the scalar ``loss``, keyed by node id."""
        if loss.tape is not self:
            raise UsageError("backward called on a value that is not on this tape")
        if loss.shape != (1, 1):
            raise UsageError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for node in reversed(self.nodes):
            g = adj.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
        return adj


def _lift(x) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, Parameter):
        tape = Tape.active()
        if tape is None:
            return Var(x.value)
        return tape.leaf(x)
    return Var(as_matrix(x, copy=False))


def _node(value, parents, backward_fn) -> Var:
    requires_grad = any(p.requires_grad for p in parents)
    out = Var(value, parents, backward_fn, requires_grad)
    tape = Tape.active()
    if requires_grad and tape is not None:
        tape.record(out)
    return out


def _same_shape(op: str, a: Var, b: Var) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.value, b.value

    def back(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _node(av @ bv, (a, b), back)


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    _same_shape("add", a, b)
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    _same_shape("sub", a, b)
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float) -> Var:
    a = _lift(a)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def add_row(a, row) -> Var:
    """``a + row`` with the 1 x cols ``row`` broadcast over the rows of ``a``."""
    a, row = _lift(a), _lift(row)
    if row.shape != (1, a.shape[1]):
        raise ShapeError(f"add_row: row shape {row.shape} does not fit matrix {a.shape}")
    return _node(a.value + row.value, (a, row), lambda g: (g, g.sum(axis=0, keepdims=True)))


def transpose(a) -> Var:
    a = _lift(a)
    return _node(a.value.T.copy(), (a,), lambda g: (g.T,))


def relu(a) -> Var:
    a = _lift(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Var:
    a = _lift(a)
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def softmax_rows(a) -> Var:
    a = _lift(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _node(y, (a,), back)


def sum_all(a) -> Var:
    a = _lift(a)
    shape = a.shape
    return _node(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a) -> Var:
    a = _lift(a)
    n = a.value.size
    return scale(sum_all(a), 1.0 / n)


def mse_loss(pred, target) -> Var:
    """Mean over all entries of the squared difference, as a 1x1 node."""
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.value - target.value
    n = diff.size

    def back(g):
        gp = g[0, 0] * (2.0 / n) * diff
        return (gp, -gp)

    return _node(np.array([[np.mean(diff * diff)]]), (pred, target), back)


# ---------------------------------------------------------------------------
# gradient extraction
# ---------------------------------------------------------------------------

def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every trainable parameter reached."""
    if not isinstance(loss, Var) or loss.tape is None:
        raise UsageError("backward called on a value that was not recorded on a tape")
    tape = loss.tape
    adj = tape.gradients(loss)
    for node in tape._leaves.values():
        g = adj.get(id(node))
        if g is not None and node.param.trainable:
            node.param.grad += g


def grad(loss: Var, params: Sequence[Parameter]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params`` without touching any accumulator.

    Parameters the loss does not depend on get all-zero gradients.
    """
    if not isinstance(loss, Var) or loss.tape is None:
        raise UsageError("grad called on a value that was not recorded on a tape")
    tape = loss.tape
    adj = tape.gradients(loss)
    out = []
    for p in params:
        node = tape._leaves.get(id(p))
        g = adj.get(id(node)) if node is not None else None
        out.append(np.zeros_like(p.value) if g is None else g.copy())
    return out
