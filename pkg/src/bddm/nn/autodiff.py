"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to its :class:`Var` nodes in
execution order, so the recorded list is already topologically sorted.
:meth:`Tape.backward` walks it once in reverse, accumulating adjoints.

Every primitive below also accepts plain ``numpy`` arrays and then simply
returns the plain result. Model code written against these functions runs
unchanged with or without a tape, and both paths evaluate the very same
floating point expressions.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from bddm.errors import ContractError, ShapeError

VJP = Callable[[np.ndarray], np.ndarray]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node on a tape: a value plus the recipe for pulling adjoints back."""

    __slots__ = ("value", "tape", "index", "parents", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, tape: "Tape", parents: tuple[tuple["Var", VJP], ...] = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    @property
    def T(self) -> "Var":
        return transpose(self)

    def sum(self, axis=None):
        return sum(self, axis=axis)

    def mean(self, axis=None):
        return mean(self, axis=axis)


class Tape:
    """Records primitive operations; single-threaded, never shared."""

    def __init__(self) -> None:
        self.nodes: list[Var] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value) -> Var:
        """Register a leaf (parameter or input) on this tape."""
        return Var(np.array(value, dtype=np.float64), self)

    def record(self, value: np.ndarray, parents: Iterable[tuple[Var, VJP]]) -> Var:
        parents = tuple(parents)
        for p, _ in parents:
            if p.tape is not self:
                raise ContractError("cannot mix variables from different tapes")
        return Var(value, self, parents)

    def backward(self, loss: Var) -> dict[Var, np.ndarray]:
        """Return d(loss)/d(leaf) for every leaf recorded before ``loss``."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss must be a variable recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                cur = grads[parent.index]
                grads[parent.index] = contrib if cur is None else cur + contrib
        out = {}
        for node in self.nodes[: loss.index + 1]:
            if node.is_leaf:
                g = grads[node.index]
                out[node] = np.zeros_like(node.value) if g is None else g
        return out


def backward(tape: Tape, loss: Var) -> dict[Var, np.ndarray]:
    return tape.backward(loss)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _val(x):
    return x.value if isinstance(x, Var) else x


def add(a, b):
    out = _val(a) + _val(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g, s=a.shape: _unbroadcast(g, s)))
    if isinstance(b, Var):
        parents.append((b, lambda g, s=b.shape: _unbroadcast(g, s)))
    return tape.record(out, parents)


def sub(a, b):
    out = _val(a) - _val(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g, s=a.shape: _unbroadcast(g, s)))
    if isinstance(b, Var):
        parents.append((b, lambda g, s=b.shape: -_unbroadcast(g, s)))
    return tape.record(out, parents)


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g * bv, a.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(g * av, b.shape)))
    return tape.record(out, parents)


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g / bv, a.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(-g * av / (bv * bv), b.shape)))
    return tape.record(out, parents)


def power(a, exponent: float):
    av = _val(a)
    out = av**exponent
    if not isinstance(a, Var):
        return out
    return a.tape.record(out, [(a, lambda g: g * exponent * av ** (exponent - 1))])


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} and {bv.shape} do not align")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: g @ bv.T))
    if isinstance(b, Var):
        parents.append((b, lambda g: np.outer(av, g) if av.ndim == 1 else av.T @ g))
    return tape.record(out, parents)


def transpose(a):
    if not isinstance(a, Var):
        return np.asarray(a).T
    return a.tape.record(a.value.T, [(a, lambda g: g.T)])


def sum(a, axis=None):  # noqa: A001
    av = _val(a)
    out = np.sum(av, axis=axis)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return a.tape.record(out, [(a, vjp)])


def mean(a, axis=None):
    av = _val(a)
    count = av.size if axis is None else av.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


def tanh(a):
    out = np.tanh(_val(a))
    if not isinstance(a, Var):
        return out
    return a.tape.record(out, [(a, lambda g: g * (1.0 - out * out))])


def relu(a):
    av = _val(a)
    out = np.maximum(av, 0.0)
    if not isinstance(a, Var):
        return out
    return a.tape.record(out, [(a, lambda g: g * (av > 0.0))])


def sigmoid(a, eps: float = 1e-12):
    """Logistic function clamped to ``[eps, 1 - eps]``."""
    av = _val(a)
    raw = 0.5 * (1.0 + np.tanh(0.5 * av))
    out = np.clip(raw, eps, 1.0 - eps)
    if not isinstance(a, Var):
        return out
    inside = (raw > eps) & (raw < 1.0 - eps)
    return a.tape.record(out, [(a, lambda g: g * raw * (1.0 - raw) * inside)])


def identity(a):
    return a


def log(a):
    av = _val(a)
    out = np.log(av)
    if not isinstance(a, Var):
        return out
    return a.tape.record(out, [(a, lambda g: g / av)])


def exp(a):
    out = np.exp(_val(a))
    if not isinstance(a, Var):
        return out
    return a.tape.record(out, [(a, lambda g: g * out)])


def sqrt(a):
    out = np.sqrt(_val(a))
    if not isinstance(a, Var):
        return out
    return a.tape.record(out, [(a, lambda g: 0.5 * g / out)])


def square(a):
    av = _val(a)
    out = av * av
    if not isinstance(a, Var):
        return out
    return a.tape.record(out, [(a, lambda g: 2.0 * g * av)])


def where(mask: np.ndarray, a, b):
    """Select elementwise; ``mask`` is a constant boolean array."""
    out = np.where(mask, _val(a), _val(b))
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(np.where(mask, g, 0.0), a.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(np.where(mask, 0.0, g), b.shape)))
    return tape.record(out, parents)


def value(x) -> np.ndarray:
    """Plain array behind ``x`` whether or not it lives on a tape."""
    return _val(x)
