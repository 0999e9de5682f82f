"""Define-by-run reverse-mode differentiation over per-path arrays.

Every batched :class:`Var` carries one value (or one row of values) per
Monte Carlo path. Parameters are unbatched leaves; their gradients are summed
over the batch during the backward sweep.

Subgradient conventions at kinks: ``abs'(0) = 0``, ``relu'(0) = 0``,
``leaky_relu'(0) = slope`` and a clamp input sitting exactly on a bound is
treated as inside the band.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "TapeError",
    "abs_",
    "exp",
    "log",
    "maximum",
    "relu",
    "leaky_relu",
    "tanh",
    "clamp",
    "reduce_mean",
    "reduce_sum",
    "affine",
    "column",
    "concat",
]


class TapeError(ValueError):
    """Raised on mismatched tapes, batch sizes or invalid backward roots."""


@dataclass
class _Node:
    op: str
    value: np.ndarray
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    batched: bool
    requires_grad: bool


class Tape:
    """Append-only record of operations.

    With ``grad=False`` the tape keeps values only. Forward values are
    computed by the same code in both modes, so they agree to the last bit.
    """

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.nodes: list[_Node] = []
        self.batch_size: int | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op, value, parents=(), vjp=None, batched=True, requires_grad=None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if batched:
            if value.ndim == 0:
                raise TapeError("batched values need a leading path axis")
            n = value.shape[0]
            if self.batch_size is None:
                self.batch_size = n
            elif n != self.batch_size:
                raise TapeError(f"batch size {n} does not match tape batch size {self.batch_size}")
        if requires_grad is None:
            requires_grad = any(self.nodes[p].requires_grad for p in parents)
        keep = vjp if (self.grad and requires_grad) else None
        self.nodes.append(_Node(op, value, tuple(parents), keep, batched, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> Var:
        """Batched input with leading axis = path index; gradients are tracked."""
        return self._push("leaf", value, requires_grad=True)

    def param(self, value) -> Var:
        """Unbatched trainable leaf."""
        return self._push("param", value, batched=False, requires_grad=True)

    def data(self, value) -> Var:
        """Batched input that is never differentiated (prices, features)."""
        return self._push("data", value, requires_grad=False)

    def const(self, value) -> Var:
        """Data that is never differentiated; its adjoint stays zero."""
        value = np.asarray(value, dtype=np.float64)
        batched = value.ndim > 0 and self.batch_size == value.shape[0]
        return self._push("const", value, batched=batched, requires_grad=False)

    def backward(self, root: Var) -> list[np.ndarray]:
        """Reverse sweep from a single-element root.

        Returns one adjoint array per node, indexed like ``self.nodes``; nodes
        the root does not depend on get zeros.
        """
        if root.tape is not self:
            raise TapeError("root belongs to a different tape")
        if not self.grad:
            raise TapeError("tape was built with grad=False")
        if root.value.size != 1:
            raise TapeError(f"backward root must have batch size 1, got shape {root.value.shape}")
        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None or not self.nodes[p].requires_grad:
                    continue
                gp = _unbroadcast(gp, self.nodes[p].value.shape)
                adj[p] = gp if adj[p] is None else adj[p] + gp
        return [np.zeros_like(n.value) if a is None else a for a, n in zip(adj, self.nodes)]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Var:
    __slots__ = ("tape", "index")
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def node(self) -> _Node:
        return self.tape.nodes[self.index]

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(op={self.node.op!r}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise TapeError("operands live on different tapes")
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    tapes = {id(x.tape): x.tape for x in xs if isinstance(x, Var)}
    if not tapes:
        raise TapeError("at least one operand must be a Var")
    if len(tapes) > 1:
        raise TapeError("operands live on different tapes")
    return next(iter(tapes.values()))


def _binary(op, a, b, fn, vjp_a, vjp_b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if a.node.batched and b.node.batched and av.shape[0] != bv.shape[0]:
        raise TapeError(f"batch sizes differ: {av.shape[0]} vs {bv.shape[0]}")
    out = fn(av, bv)
    return tape._push(
        op,
        out,
        (a.index, b.index),
        lambda g: (vjp_a(g, av, bv), vjp_b(g, av, bv)),
        batched=a.node.batched or b.node.batched,
    )


def _unary(op, x: Var, fn, vjp) -> Var:
    xv = x.value
    out = fn(xv)
    return x.tape._push(op, out, (x.index,), lambda g: (vjp(g, xv, out),), batched=x.node.batched)


def add(a, b) -> Var:
    return _binary("add", a, b, np.add, lambda g, a, b: g, lambda g, a, b: g)


def sub(a, b) -> Var:
    return _binary("sub", a, b, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)


def mul(a, b) -> Var:
    return _binary("mul", a, b, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a)


def neg(x: Var) -> Var:
    return _unary("neg", x, np.negative, lambda g, x, y: -g)


def abs_(x: Var) -> Var:
    return _unary("abs", x, np.abs, lambda g, x, y: g * np.sign(x))


def exp(x: Var) -> Var:
    return _unary("exp", x, np.exp, lambda g, x, y: g * y)


def log(x: Var) -> Var:
    return _unary("log", x, np.log, lambda g, x, y: g / x)


def tanh(x: Var) -> Var:
    return _unary("tanh", x, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def maximum(x: Var, c: float) -> Var:
    """Elementwise ``max(x, c)`` against a constant; gradient 0 where ``x <= c``."""
    return _unary("maximum", x, lambda v: np.maximum(v, c), lambda g, x, y: g * (x > c))


def relu(x: Var) -> Var:
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), lambda g, x, y: np.where(x > 0.0, g, 0.0))


def leaky_relu(x: Var, slope: float = 0.01) -> Var:
    return _unary(
        "leaky_relu",
        x,
        lambda v: np.where(v > 0.0, v, slope * v),
        lambda g, x, y: g * np.where(x > 0.0, 1.0, slope),
    )


def clamp(x: Var, lo, hi, leak: float = 0.0) -> Var:
    """Project ``x`` onto ``[lo, hi]`` per path.

    Where ``lo > hi`` the output is the midpoint ``(lo + hi) / 2``. The
    forward value is an exact projection; ``leak`` only adds a slope
    ``d out / d x = leak`` in the clamped regions during backward.
    """
    if leak < 0:
        raise ValueError("leak must be non-negative")
    tape = _tape_of(x, lo, hi)
    x, lo, hi = _lift(tape, x), _lift(tape, lo), _lift(tape, hi)
    xv, lv, hv = np.broadcast_arrays(x.value, lo.value, hi.value)
    inverted = lv > hv
    below = ~inverted & (xv < lv)
    above = ~inverted & (xv > hv)
    inside = ~(inverted | below | above)
    out = np.where(inverted, 0.5 * (lv + hv), np.where(below, lv, np.where(above, hv, xv)))

    def vjp(g):
        gx = g * np.where(inside, 1.0, np.where(inverted, 0.0, leak))
        gl = g * np.where(below, 1.0, np.where(inverted, 0.5, 0.0))
        gh = g * np.where(above, 1.0, np.where(inverted, 0.5, 0.0))
        return gx, gl, gh

    batched = x.node.batched or lo.node.batched or hi.node.batched
    return tape._push("clamp", out, (x.index, lo.index, hi.index), vjp, batched=batched)


def reduce_mean(x: Var) -> Var:
    """Mean over the path axis, returned as a batch of one."""
    xv = x.value
    n = xv.shape[0] if xv.ndim else 0
    if n == 0:
        raise TapeError("cannot take the mean of an empty batch")
    out = np.asarray([xv.sum(axis=0) / n]).reshape((1,) + xv.shape[1:])
    return x.tape._push("reduce_mean", out, (x.index,), lambda g: (np.broadcast_to(g / n, xv.shape),), batched=False)


def reduce_sum(x: Var, weight: float = 1.0) -> Var:
    """``weight * sum`` over the path axis, as a batch of one."""
    xv = x.value
    if xv.ndim == 0 or xv.shape[0] == 0:
        raise TapeError("cannot reduce an empty batch")
    out = (weight * xv.sum(axis=0)).reshape((1,) + xv.shape[1:])
    return x.tape._push("reduce_sum", out, (x.index,), lambda g: (np.broadcast_to(weight * g, xv.shape),), batched=False)


def affine(x: Var, weight: Var, bias: Var) -> Var:
    """``x @ weight + bias`` over the last axis of ``x`` (shape ``(n, ..., d_in)``)."""
    tape = _tape_of(x, weight, bias)
    x, weight, bias = _lift(tape, x), _lift(tape, weight), _lift(tape, bias)
    xv, wv = x.value, weight.value
    if xv.ndim < 2 or wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise TapeError(f"affine shape mismatch: input {xv.shape} vs weight {wv.shape}")
    if bias.value.shape != (wv.shape[1],):
        raise TapeError(f"bias shape {bias.value.shape} does not match weight {wv.shape}")
    x2 = xv.reshape(-1, xv.shape[-1])
    out = x2 @ wv
    out += bias.value
    out = out.reshape(xv.shape[:-1] + (wv.shape[1],))
    need_x = x.node.requires_grad

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wv.T).reshape(xv.shape) if need_x else None
        return gx, x2.T @ g2, g2.sum(axis=0)

    return tape._push("affine", out, (x.index, weight.index, bias.index), vjp)


def column(x: Var, j: int) -> Var:
    """Select entry ``j`` of the last axis."""
    xv = x.value
    if xv.ndim < 2:
        raise TapeError("column() expects at least a 2-d value")

    def vjp(g):
        full = np.zeros_like(xv)
        full[..., j] = g
        return (full,)

    return x.tape._push("column", xv[..., j], (x.index,), vjp, batched=x.node.batched)


def concat(parts: Sequence) -> Var:
    """Stack per-path columns (1-d or 2-d pieces) along axis 1."""
    tape = _tape_of(*parts)
    vs = [_lift(tape, p) for p in parts]
    mats = [v.value.reshape(v.value.shape[0], -1) for v in vs]
    widths = [m.shape[1] for m in mats]
    out = np.concatenate(mats, axis=1)
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return [g[:, bounds[k] : bounds[k + 1]].reshape(v.value.shape) for k, v in enumerate(vs)]

    return tape._push("concat", out, tuple(v.index for v in vs), vjp)
