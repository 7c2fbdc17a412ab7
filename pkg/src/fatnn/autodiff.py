"""Second-order input jets and a reverse-mode tape over numpy arrays.

Every subnetwork of a tensor network sees a single scalar input, so the
derivatives a PINN residual needs (u_x, u_xx per dimension) are exact when
(value, d/ds, d^2/ds^2) triples are pushed forward through each subnetwork.
Gradients with respect to the parameters then come from one reverse sweep
over a tape on which the jet arithmetic was recorded.

All ops in this module accept either plain numpy values or :class:`Var`
nodes.  With plain values they simply compute; with ``Var`` operands they
also append a record to the operand's tape.  The same model code therefore
serves for fast evaluation and for differentiated training steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "trigblend", "sin", "cos")


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a forward value or a gradient."""


class Tape:
    """Append-only record of primitive operations.

    Node ``i`` only ever references operands with index ``< i``, so a reverse
    sweep in index order is a valid topological traversal.
    """

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[tuple[Callable, ...]] = []
        self.values: list = []
        self.visits = 0

    def __len__(self) -> int:
        return len(self.ops)

    def _push(self, op: str, value, parents: Sequence[int], vjps: Sequence[Callable]) -> "Var":
        for p in parents:
            if not 0 <= p < len(self.ops):
                raise ValueError(f"dangling operand index {p} for op {op!r}")
        self.ops.append(op)
        self.parents.append(tuple(parents))
        self.vjps.append(tuple(vjps))
        self.values.append(value)
        return Var(self, len(self.ops) - 1, value)

    def leaf(self, value) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        return self._push("leaf", value, (), ())

    def backward(self, root: "Var") -> list:
        """Reverse sweep from a scalar ``root``; returns adjoints indexed by node."""
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if not 0 <= root.idx < len(self.ops):
            raise ValueError(f"dangling root index {root.idx}")
        if np.ndim(root.value) != 0:
            raise ValueError("root must be a scalar node")
        adj: list = [None] * len(self.ops)
        adj[root.idx] = np.ones_like(root.value, dtype=np.float64)
        self.visits = 0
        for i in range(root.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            self.visits += 1
            for p, vjp in zip(self.parents[i], self.vjps[i]):
                contrib = vjp(g)
                adj[p] = contrib if adj[p] is None else adj[p] + contrib
        return adj

    def first_nonfinite(self) -> str | None:
        for i, v in enumerate(self.values):
            if not np.all(np.isfinite(v)):
                return f"node {i} ({self.ops[i]}) produced a non-finite value"
        return None


class Var:
    """Handle to one node on a :class:`Tape`."""

    __slots__ = ("tape", "idx", "value")
    __array_priority__ = 1000  # keep ndarray <op> Var on our side

    def __init__(self, tape: Tape, idx: int, value) -> None:
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self) -> tuple:
        return np.shape(self.value)

    def __repr__(self) -> str:
        return f"Var(#{self.idx}, shape={self.shape})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = x.tape
    return tape


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(op, a, b, value, da, db):
    tape = _tape_of(a, b)
    if tape is None:
        return value
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a.idx)
        vjps.append(da)
    if isinstance(b, Var):
        parents.append(b.idx)
        vjps.append(db)
    return tape._push(op, value, parents, vjps)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _binary(
        "add", a, b, av + bv,
        lambda g: _unbroadcast(g, sa),
        lambda g: _unbroadcast(g, sb),
    )


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _binary(
        "sub", a, b, av - bv,
        lambda g: _unbroadcast(g, sa),
        lambda g: -_unbroadcast(g, sb),
    )


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _binary(
        "mul", a, b, av * bv,
        lambda g: _unbroadcast(g * bv, sa),
        lambda g: _unbroadcast(g * av, sb),
    )


def matmul(a, b):
    """``a @ b`` for a 2-D left operand and a 1-D or 2-D right operand."""
    av, bv = value_of(a), value_of(b)
    if np.ndim(av) != 2 or np.ndim(bv) not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {np.shape(av)} @ {np.shape(bv)}")
    if np.ndim(bv) == 1:
        da = lambda g: np.outer(g, bv)
        db = lambda g: av.T @ g
    else:
        da = lambda g: g @ bv.T
        db = lambda g: av.T @ g
    return _binary("matmul", a, b, av @ bv, da, db)


def bmm(a, b):
    """Batched matrix product of ``(B, p, q)`` and ``(B, q, s)`` arrays."""
    av, bv = value_of(a), value_of(b)
    if np.ndim(av) != 3 or np.ndim(bv) != 3 or av.shape[2] != bv.shape[1]:
        raise ValueError(f"bmm shape mismatch: {np.shape(av)} x {np.shape(bv)}")
    return _binary(
        "bmm", a, b, np.matmul(av, bv),
        lambda g: np.matmul(g, bv.transpose(0, 2, 1)),
        lambda g: np.matmul(av.transpose(0, 2, 1), g),
    )


def reshape(a, shape):
    av = value_of(a)
    old = np.shape(av)
    out = np.reshape(av, shape)
    if not isinstance(a, Var):
        return out
    return a.tape._push("reshape", out, (a.idx,), (lambda g: np.reshape(g, old),))


def total(a, axis=None):
    """Sum over ``axis`` (all axes when ``None``)."""
    av = value_of(a)
    shape = np.shape(av)
    out = np.sum(av, axis=axis)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return a.tape._push("sum", out, (a.idx,), (vjp,))


def mean(a):
    n = np.size(value_of(a))
    if n == 0:
        raise ValueError("mean of an empty array")
    return mul(total(a), 1.0 / n)


def square(a):
    return mul(a, a)


# -- activations -----------------------------------------------------------


def activation_table(kind: str, v, top: int) -> list:
    """Derivatives of orders 0..``top`` of activation ``kind`` at ``v``.

    ``trigblend`` is 0.5 sin + 0.5 cos.  The sinusoid derivatives cycle with
    period four, so each needs one sin and one cos evaluation in total.
    """
    if kind == "tanh":
        if top > 3:
            raise ValueError(f"tanh derivative of order {top} not supported")
        t = np.tanh(v)
        s = 1.0 - t * t
        table = [t, s, -2.0 * t * s, -2.0 * s * (1.0 - 3.0 * t * t)]
        return table[: top + 1]
    if kind == "sin":
        p, q = np.sin(v), np.cos(v)
    elif kind == "cos":
        p, q = np.cos(v), -np.sin(v)
    elif kind == "trigblend":
        sn, cs = np.sin(v), np.cos(v)
        p, q = 0.5 * (sn + cs), 0.5 * (cs - sn)
    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    cycle = (p, q, -p, -q)
    return [cycle[n % 4] for n in range(top + 1)]


def activation(kind: str, order: int, v):
    """``order``-th derivative of the activation ``kind`` evaluated at ``v``."""
    return activation_table(kind, v, order)[order]


def _act_node(a, table: list, order: int, kind: str):
    out = table[order]
    if not isinstance(a, Var):
        return out
    nxt = table[order + 1]
    return a.tape._push(f"act:{kind}:{order}", out, (a.idx,), (lambda g: g * nxt,))


def act(kind: str, order: int, a):
    top = order + 1 if isinstance(a, Var) else order
    return _act_node(a, activation_table(kind, value_of(a), top), order, kind)


# -- jets ------------------------------------------------------------------


@dataclass
class Jet2:
    """(value, d/ds, d^2/ds^2) with respect to one scalar input s.

    Fields may be floats, arrays (a "jet vector", one slot per trailing
    entry) or tape nodes.
    """

    v: object
    d1: object
    d2: object

    def as_tuple(self) -> tuple:
        return (self.v, self.d1, self.d2)


def jet_lift(x: float, active: bool) -> Jet2:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot lift non-finite input {x}")
    return Jet2(x, 1.0 if active else 0.0, 0.0)


def jet_activate(kind: str, j: Jet2, want: int = 2) -> Jet2:
    """Chain rule through an elementwise activation.

    ``want`` limits the derivative order propagated (0, 1 or 2); slots above
    it are left as ``None``.
    """
    want = 0 if j.d1 is None else (1 if j.d2 is None else want)
    top = want + 1 if isinstance(j.v, Var) else want
    table = activation_table(kind, value_of(j.v), top)
    g0 = _act_node(j.v, table, 0, kind)
    if want == 0:
        return Jet2(g0, None, None)
    g1 = _act_node(j.v, table, 1, kind)
    d1 = mul(g1, j.d1)
    if want == 1:
        return Jet2(g0, d1, None)
    g2 = _act_node(j.v, table, 2, kind)
    d2 = add(mul(g2, mul(j.d1, j.d1)), mul(g1, j.d2))
    return Jet2(g0, d1, d2)


def jet_affine(weights, bias, j: Jet2) -> Jet2:
    """Dense layer applied slot-wise: bias only enters the value slot."""
    wv, bv = value_of(weights), value_of(bias)
    inner = np.shape(value_of(j.v))[-1] if np.ndim(value_of(j.v)) else 1
    if np.ndim(wv) != 2 or wv.shape[0] != inner or np.shape(bv) != (wv.shape[1],):
        raise ValueError(
            f"affine shape mismatch: input width {inner}, weights {np.shape(wv)}, bias {np.shape(bv)}"
        )

    def lin(x):
        if x is None:
            return None
        if np.ndim(value_of(x)) == 1:
            return matmul(reshape(x, (1, -1)), weights) if isinstance(x, Var) else value_of(x) @ wv
        return matmul(x, weights)

    v = add(lin(j.v), bias)
    return Jet2(v, lin(j.d1), lin(j.d2))


# -- gradients -------------------------------------------------------------


@dataclass
class GradientBuffer:
    """Flat gradient aligned with a model's parameter layout."""

    data: np.ndarray
    _norm: float | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.data.size

    @property
    def norm(self) -> float:
        if self._norm is None:
            self._norm = float(np.linalg.norm(self.data))
        return self._norm

    def merge(self, other: "GradientBuffer") -> "GradientBuffer":
        if len(other) != len(self):
            raise ValueError("gradient buffers have different layouts")
        return GradientBuffer(self.data + other.data)


def grad_of_scalar(tape: Tape, root: Var, leaves: Sequence[Var]) -> GradientBuffer:
    """Adjoints of ``root`` for each leaf, flattened in ``leaves`` order.

    Leaves the root does not depend on get zero gradient.
    """
    if not np.isfinite(root.value):
        raise NonFiniteError(tape.first_nonfinite() or "loss is not finite")
    adj = tape.backward(root)
    parts = []
    for leaf in leaves:
        if leaf.tape is not tape:
            raise ValueError("leaf belongs to a different tape")
        g = adj[leaf.idx]
        parts.append(np.zeros(np.size(leaf.value)) if g is None else np.ravel(g))
    flat = np.concatenate(parts) if parts else np.zeros(0)
    if not np.all(np.isfinite(flat)):
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise NonFiniteError(f"non-finite gradient entry at flat index {bad}")
    return GradientBuffer(flat)


def value_and_grad(fn: Callable, params: np.ndarray) -> tuple[float, np.ndarray]:
    """Evaluate ``fn(p)`` on a fresh tape with ``p`` a leaf for ``params``."""
    tape = Tape()
    p = tape.leaf(np.array(params, dtype=np.float64))
    out = fn(p)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(p.value)
    return float(out.value), grad_of_scalar(tape, out, [p]).data.reshape(np.shape(params))


def central_differences(fn: Callable, params: np.ndarray, step: float) -> np.ndarray:
    params = np.array(params, dtype=np.float64)
    flat = params.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(params))
        flat[i] = orig - step
        fm = float(fn(params))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(params.shape)


def richardson_differences(fn: Callable, params: np.ndarray, step: float) -> np.ndarray:
    """Central differences at ``step`` and ``step/2`` combined to cancel the O(h^2) term."""
    coarse = central_differences(fn, params, step)
    fine = central_differences(fn, params, step / 2)
    return (4.0 * fine - coarse) / 3.0


def finite_diff_check(fn: Callable, params: np.ndarray, step: float = 1e-5) -> float:
    """Largest coordinate-wise relative error between tape and central-difference gradients.

    ``fn`` must work on both a plain array and a tape node (it is written in
    terms of this module's ops).  Coordinates whose gradient is tiny are
    compared against a floor of 1e-6 times the largest gradient entry, so
    rounding noise on near-zero entries does not dominate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, g = value_and_grad(fn, params)
    return gradient_rel_error(g, central_differences(fn, params, step))


def gradient_rel_error(g, fd) -> float:
    """Coordinate-wise relative error with a floor of 1e-6 times the largest entry."""
    g, fd = np.ravel(g), np.ravel(fd)
    scale = max(float(np.max(np.abs(fd), initial=0.0)), float(np.max(np.abs(g), initial=0.0)))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(g)), 1e-6 * scale)
    return float(np.max(np.abs(g - fd) / denom))
