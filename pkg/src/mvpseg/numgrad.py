"""Reverse-mode differentiation over dense float64 numpy arrays.

Every value is a :class:`Node` wrapping an ``np.ndarray``. Operations record
their parents and a closure mapping the output gradient to one gradient per
parent. Nodes get a monotonically increasing id at creation, so sorting the
reachable nodes by id is a valid topological order (the tape).

Broadcasting is deliberately absent: operands of elementwise ops must have
identical shapes, the only exception being scalar-times-tensor. Use
:func:`expand` to align shapes explicitly.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12
NORM_EPS = 1e-12

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class Node:
    """A value in the graph plus its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "op", "parents", "_backward", "id")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple[Node, ...] = (),
        backward: Callable | None = None,
        _owned: bool = False,
    ):
        if _owned and isinstance(value, np.ndarray) and value.dtype == np.float64:
            self.value = value
        else:
            self.value = np.array(value, dtype=np.float64)
        self.value.flags.writeable = False
        self.grad = np.zeros_like(self.value)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def assign(self, value) -> None:
        """Replace the value in place of an optimizer update; shape must match."""
        value = np.array(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise ShapeError(f"assign: shape {value.shape} != {self.value.shape}")
        value.flags.writeable = False
        self.value = value

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __mul__(self, other):
        if _is_scalar(other):
            return mul_scalar(self, other)
        if self.ndim == 0:
            return mul_scalar(other, self)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div_scalar(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_scalar(x) -> bool:
    if isinstance(x, Node):
        return x.ndim == 0
    return np.ndim(x) == 0


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def parameter(x) -> Node:
    return Node(x, requires_grad=True)


def _make(value: np.ndarray, op: str, parents: tuple[Node, ...], backward: Callable) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, True, op, parents, backward, _owned=True)
    return Node(value, False, op, _owned=True)


def _check_same(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_axis(op: str, x: Node, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


# ---------------------------------------------------------------------------
# tape and backward


def tape(loss: Node) -> list[Node]:
    """Nodes reachable from ``loss`` that require grad, in creation order."""
    seen = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen[n.id] = n
        stack.extend(n.parents)
    return [seen[i] for i in sorted(seen)]


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Gradients add onto whatever is already stored; call :func:`zero_grad`
    between optimizer steps.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward requires scalar, got shape {loss.shape}")
    order = tape(loss)
    if not order:
        return
    upstream = {loss.id: np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = upstream.pop(node.id, None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in upstream:
                upstream[parent.id] = upstream[parent.id] + pg
            else:
                upstream[parent.id] = pg


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same("add", a, b)
    return _make(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same("sub", a, b)
    return _make(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def mul_scalar(x, s) -> Node:
    """``s * x`` where ``s`` is a python float or a 0-d node."""
    x, s = as_node(x), as_node(s)
    if s.ndim != 0:
        raise ShapeError(f"mul_scalar: scalar operand has shape {s.shape}")
    xv, sv = x.value, s.value

    def bw(g):
        return g * sv, np.sum(g * xv)

    return _make(xv * sv, "mul_scalar", (x, s), bw)


def div_scalar(x, s) -> Node:
    x, s = as_node(x), as_node(s)
    if s.ndim != 0:
        raise ShapeError(f"div_scalar: scalar operand has shape {s.shape}")
    xv, sv = x.value, s.value
    out = xv / sv

    def bw(g):
        return g / sv, -np.sum(g * out) / sv

    return _make(out, "div_scalar", (x, s), bw)


def tanh(x) -> Node:
    x = as_node(x)
    y = np.tanh(x.value)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Node:
    x = as_node(x)
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Node:
    x = as_node(x)
    y = np.exp(x.value)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log_eps(x) -> Node:
    """``log(max(x, 1e-12))``; zero gradient where the floor is active."""
    x = as_node(x)
    v = x.value
    active = v > LOG_EPS
    clipped = np.maximum(v, LOG_EPS)
    return _make(np.log(clipped), "log_eps", (x,), lambda g: (np.where(active, g / clipped, 0.0),))


def abs_(x) -> Node:
    x = as_node(x)
    sign = np.sign(x.value)
    return _make(np.abs(x.value), "abs", (x,), lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Node:
    """Matrix product for 2-d @ 2-d and 2-d @ 1-d operands."""
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    if b.ndim == 1:
        def bw(g):
            return np.outer(g, bv), av.T @ g
    else:
        def bw(g):
            return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), bw)


def dot(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _make(np.dot(av, bv), "dot", (a, b), lambda g: (g * bv, g * av))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_axis(x, axis: int | None = None) -> Node:
    x = as_node(x)
    shape = x.shape
    if axis is None:
        return _make(np.sum(x.value), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = _check_axis("sum_axis", x, axis)
    return _make(
        np.sum(x.value, axis=axis),
        "sum_axis",
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def mean_axis(x, axis: int | None = None) -> Node:
    x = as_node(x)
    shape = x.shape
    if axis is None:
        n = x.value.size
        return _make(np.mean(x.value), "mean", (x,), lambda g: (np.full(shape, g / n),))
    axis = _check_axis("mean_axis", x, axis)
    n = shape[axis]
    if n == 0:
        raise ShapeError(f"mean_axis: empty axis {axis} in shape {shape}")
    return _make(
        np.mean(x.value, axis=axis),
        "mean_axis",
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),),
    )


def reshape(x, shape: Sequence[int]) -> Node:
    x = as_node(x)
    old = x.shape
    try:
        y = x.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from e
    return _make(y, "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int] | None = None) -> Node:
    x = as_node(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.value, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def expand(x, shape: Sequence[int]) -> Node:
    """Explicit broadcast of ``x`` to ``shape`` (numpy rules, trailing alignment)."""
    x = as_node(x)
    old = x.shape
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.value, shape)
    except ValueError as e:
        raise ShapeError(f"expand: cannot broadcast {old} to {shape}") from e
    lead = len(shape) - len(old)
    kept = tuple(i for i, n in enumerate(old) if n == 1 and shape[lead + i] != 1)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if kept:
            g = g.sum(axis=kept, keepdims=True)
        return (g,)

    return _make(y.copy(), "expand", (x,), bw)


def concat_axis(xs: Sequence, axis: int = 0) -> Node:
    xs = [as_node(x) for x in xs]
    if not xs:
        raise ShapeError("concat_axis: nothing to concatenate")
    axis = _check_axis("concat_axis", xs[0], axis)
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeError(f"concat_axis: shape mismatch {ref} vs {x.shape} along axis {axis}")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(
        np.concatenate([x.value for x in xs], axis=axis),
        "concat_axis",
        tuple(xs),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def stack(xs: Sequence, axis: int = 0) -> Node:
    xs = [as_node(x) for x in xs]
    if not xs:
        raise ShapeError("stack: nothing to stack")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.shape != ref:
            raise ShapeError(f"stack: shape mismatch {ref} vs {x.shape}")
    axis = axis % (len(ref) + 1)
    return _make(
        np.stack([x.value for x in xs], axis=axis),
        "stack",
        tuple(xs),
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def slice_axis(x, start: int, stop: int, axis: int = 0) -> Node:
    x = as_node(x)
    axis = _check_axis("slice_axis", x, axis)
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for extent {n} (shape {x.shape})")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(x.value[idx], "slice_axis", (x,), bw)


# ---------------------------------------------------------------------------
# normalizations


def softmax_axis(x, axis: int) -> Node:
    x = as_node(x)
    axis = _check_axis("softmax_axis", x, axis)
    if x.shape[axis] == 0:
        raise ShapeError("empty softmax axis")
    z = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, "softmax_axis", (x,), bw)


def l2_normalize(x, axis: int = -1) -> Node:
    """Unit L2 norm along ``axis``; raises on any slice with norm <= 1e-12."""
    x = as_node(x)
    axis = _check_axis("l2_normalize", x, axis)
    norm = np.sqrt(np.sum(x.value * x.value, axis=axis, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise ValueError("degenerate vector")
    y = x.value / norm

    def bw(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _make(y, "l2_normalize", (x,), bw)


# ---------------------------------------------------------------------------
# finite-difference checking


def gradcheck(
    fn: Callable[[], Node],
    params: Sequence[Node],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
) -> float:
    """Worst-case error of analytic vs central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current parameter values. The
    returned error is ``|a - n| / max(|a|, |n|, atol / rtol)``, so a value
    ``<= rtol`` means every entry satisfies the relative bound or falls under
    the absolute floor.
    """
    zero_grad(params)
    backward(fn())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        base = p.value.copy()
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += h
            p.assign(plus)
            fp = fn().item()
            minus = base.copy()
            minus[idx] -= h
            p.assign(minus)
            fm = fn().item()
            num = (fp - fm) / (2 * h)
            err = abs(a[idx] - num) / max(abs(a[idx]), abs(num), atol / rtol)
            worst = max(worst, err)
        p.assign(base)
    zero_grad(params)
    return worst
