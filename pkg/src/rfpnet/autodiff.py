"""Tape-based reverse-mode automatic differentiation on dense numpy tensors.

A Tape records every primitive operation as a node (op kind, input node ids,
saved forward context, value). Gradients are obtained by a single reverse
sweep from a scalar root. Tensors are C-contiguous float32 arrays by default;
a float64 mode exists for finite-difference gradient checking.
"""

from __future__ import annotations

from typing import Any, Callable, Optional, Sequence

import numpy as np

# VJP registry: op kind -> fn(tape, node_idx, grad_out) -> tuple of grads
# aligned with the node's inputs (None for non-differentiable slots).
_VJPS: dict[str, Callable] = {}


def register_vjp(op: str):
    def deco(fn):
        _VJPS[op] = fn
        return fn
    return deco


class Node:
    """Handle to one tape position. Cheap to copy, compares by identity."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self) -> tuple:
        return self.tape.values[self.idx].shape

    def __repr__(self):
        return f"Node(idx={self.idx}, shape={self.shape})"

    # arithmetic sugar; scalars promote to scale/shift ops
    def __add__(self, other):
        if isinstance(other, Node):
            return add(self, other)
        return add_const(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return sub(self, other)
        return add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of primitive ops with per-node values and gradients.

    Node inputs always reference strictly earlier node ids, so the record is
    itself acyclic and a single reverse pass suffices. A tape is confined to
    one logical thread.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.ops: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.ctxs: list[Any] = []
        self.values: list[np.ndarray] = []
        self.grads: list[Optional[np.ndarray]] = []

    def __len__(self):
        return len(self.ops)

    def push(self, op: str, inputs: Sequence[int], value: np.ndarray, ctx=None) -> Node:
        for i in inputs:
            if not 0 <= i < len(self.ops):
                raise ValueError(f"op {op!r} references node {i} outside tape of length {len(self.ops)}")
        self.ops.append(op)
        self.inputs.append(tuple(inputs))
        self.ctxs.append(ctx)
        self.values.append(value)
        self.grads.append(None)
        return Node(self, len(self.ops) - 1)

    def leaf(self, array) -> Node:
        """Record a leaf (input or parameter). The array is cast to the tape dtype."""
        value = np.ascontiguousarray(array, dtype=self.dtype)
        return self.push("leaf", (), value)

    def backward(self, root: Node) -> None:
        """Reverse sweep seeding d(root)/d(root) = 1. Root must be scalar-valued."""
        if root.tape is not self:
            raise ValueError("root node belongs to a different tape")
        if root.value.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
        self.grads = [None] * len(self.ops)
        self.grads[root.idx] = np.ones_like(self.values[root.idx])
        for idx in range(root.idx, -1, -1):
            g = self.grads[idx]
            if g is None:
                continue
            op = self.ops[idx]
            if op == "leaf":
                continue
            input_grads = _VJPS[op](self, idx, g)
            for src, ig in zip(self.inputs[idx], input_grads):
                if ig is None:
                    continue
                if self.grads[src] is None:
                    self.grads[src] = ig.copy() if ig.base is not None or ig is g else ig
                else:
                    self.grads[src] += ig

    def grad(self, node: Node) -> np.ndarray:
        """Gradient of the last backward root w.r.t. this node (zeros if unreachable)."""
        g = self.grads[node.idx]
        if g is None:
            return np.zeros_like(self.values[node.idx])
        return g


def _same_shape(a: Node, b: Node, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.tape is not b.tape:
        raise ValueError(f"{op}: operands live on different tapes")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")
    return a.tape.push("add", (a.idx, b.idx), a.value + b.value)


@register_vjp("add")
def _add_vjp(tape, idx, g):
    return g, g


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")
    return a.tape.push("sub", (a.idx, b.idx), a.value - b.value)


@register_vjp("sub")
def _sub_vjp(tape, idx, g):
    return g, -g


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")
    return a.tape.push("mul", (a.idx, b.idx), a.value * b.value)


@register_vjp("mul")
def _mul_vjp(tape, idx, g):
    ia, ib = tape.inputs[idx]
    return g * tape.values[ib], g * tape.values[ia]


def div(a: Node, b: Node) -> Node:
    _same_shape(a, b, "div")
    return a.tape.push("div", (a.idx, b.idx), a.value / b.value)


@register_vjp("div")
def _div_vjp(tape, idx, g):
    ia, ib = tape.inputs[idx]
    bv = tape.values[ib]
    ga = g / bv
    gb = -g * tape.values[ia] / (bv * bv)
    return ga, gb


def scale(x: Node, c: float) -> Node:
    return x.tape.push("scale", (x.idx,), x.value * x.tape.dtype.type(c), ctx=c)


@register_vjp("scale")
def _scale_vjp(tape, idx, g):
    return (g * tape.dtype.type(tape.ctxs[idx]),)


def add_const(x: Node, c: float) -> Node:
    return x.tape.push("add_const", (x.idx,), x.value + x.tape.dtype.type(c))


@register_vjp("add_const")
def _add_const_vjp(tape, idx, g):
    return (g,)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(x: Node) -> Node:
    return x.tape.push("relu", (x.idx,), np.maximum(x.value, 0))


@register_vjp("relu")
def _relu_vjp(tape, idx, g):
    (ix,) = tape.inputs[idx]
    return (g * (tape.values[ix] > 0),)


def sigmoid(x: Node) -> Node:
    v = x.value
    # numerically stable two-sided form
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return x.tape.push("sigmoid", (x.idx,), out, ctx=out)


@register_vjp("sigmoid")
def _sigmoid_vjp(tape, idx, g):
    s = tape.ctxs[idx]
    return (g * s * (1.0 - s),)


def log(x: Node) -> Node:
    return x.tape.push("log", (x.idx,), np.log(x.value))


@register_vjp("log")
def _log_vjp(tape, idx, g):
    (ix,) = tape.inputs[idx]
    return (g / tape.values[ix],)


def clamp(x: Node, lo: float, hi: float) -> Node:
    v = np.clip(x.value, lo, hi)
    mask = (x.value >= lo) & (x.value <= hi)
    return x.tape.push("clamp", (x.idx,), v, ctx=mask)


@register_vjp("clamp")
def _clamp_vjp(tape, idx, g):
    return (g * tape.ctxs[idx],)


def softmax_channel(x: Node) -> Node:
    """Softmax over axis 1 (the channel axis). Rows sum to 1."""
    if x.value.ndim < 2:
        raise ValueError(f"softmax_channel needs a channel axis, got shape {x.shape}")
    v = x.value
    m = v.max(axis=1, keepdims=True)
    e = np.exp(v - m)
    out = e / e.sum(axis=1, keepdims=True)
    return x.tape.push("softmax_channel", (x.idx,), out, ctx=out)


@register_vjp("softmax_channel")
def _softmax_vjp(tape, idx, g):
    y = tape.ctxs[idx]
    dot = (g * y).sum(axis=1, keepdims=True)
    return (y * (g - dot),)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x: Node) -> Node:
    return x.tape.push("sum_all", (x.idx,), np.asarray(x.value.sum(), dtype=x.tape.dtype))


@register_vjp("sum_all")
def _sum_all_vjp(tape, idx, g):
    (ix,) = tape.inputs[idx]
    return (np.full_like(tape.values[ix], g),)


def mean_all(x: Node) -> Node:
    return scale(sum_all(x), 1.0 / x.value.size)


def channel_sums(x: Node) -> Node:
    """Sum over every axis except the channel axis (axis 1) -> (C,) vector."""
    if x.value.ndim < 2:
        raise ValueError(f"channel_sums needs a channel axis, got shape {x.shape}")
    axes = (0,) + tuple(range(2, x.value.ndim))
    return x.tape.push("channel_sums", (x.idx,), x.value.sum(axis=axes), ctx=x.shape)


@register_vjp("channel_sums")
def _channel_sums_vjp(tape, idx, g):
    shape = tape.ctxs[idx]
    expand = (1, len(g)) + (1,) * (len(shape) - 2)
    return (np.broadcast_to(g.reshape(expand), shape).copy(),)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def concat_channel(parts: Sequence[Node]) -> Node:
    """Concatenate along axis 1; inputs are recoverable by slicing."""
    if not parts:
        raise ValueError("concat_channel needs at least one input")
    tape = parts[0].tape
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[:1] + p.shape[2:] != ref[:1] + ref[2:]:
            raise ValueError(f"concat_channel: incompatible shapes {ref} vs {p.shape}")
    widths = [p.shape[1] for p in parts]
    value = np.concatenate([p.value for p in parts], axis=1)
    return tape.push("concat_channel", tuple(p.idx for p in parts), value, ctx=widths)


@register_vjp("concat_channel")
def _concat_channel_vjp(tape, idx, g):
    widths = tape.ctxs[idx]
    out, at = [], 0
    for w in widths:
        out.append(np.ascontiguousarray(g[:, at:at + w]))
        at += w
    return tuple(out)


def slice_channel(x: Node, index: int) -> Node:
    """Select one channel (axis 1), keeping the axis with extent 1."""
    if not 0 <= index < x.shape[1]:
        raise ValueError(f"channel index {index} out of range for shape {x.shape}")
    value = np.ascontiguousarray(x.value[:, index:index + 1])
    return x.tape.push("slice_channel", (x.idx,), value, ctx=(index, x.shape))


@register_vjp("slice_channel")
def _slice_channel_vjp(tape, idx, g):
    index, shape = tape.ctxs[idx]
    out = np.zeros(shape, dtype=g.dtype)
    out[:, index:index + 1] = g
    return (out,)


def slice_depth(x: Node, index: int) -> Node:
    """Select one slice along the last (depth) axis, dropping that axis."""
    if not 0 <= index < x.shape[-1]:
        raise ValueError(f"depth index {index} out of range for shape {x.shape}")
    value = np.ascontiguousarray(x.value[..., index])
    return x.tape.push("slice_depth", (x.idx,), value, ctx=(index, x.shape))


@register_vjp("slice_depth")
def _slice_depth_vjp(tape, idx, g):
    index, shape = tape.ctxs[idx]
    out = np.zeros(shape, dtype=g.dtype)
    out[..., index] = g
    return (out,)


def stack_depth(parts: Sequence[Node]) -> Node:
    """Stack equally shaped tensors along a new trailing depth axis."""
    if not parts:
        raise ValueError("stack_depth needs at least one input")
    tape = parts[0].tape
    for p in parts[1:]:
        _same_shape(parts[0], p, "stack_depth")
    value = np.stack([p.value for p in parts], axis=-1)
    return tape.push("stack_depth", tuple(p.idx for p in parts), value)


@register_vjp("stack_depth")
def _stack_depth_vjp(tape, idx, g):
    return tuple(np.ascontiguousarray(g[..., i]) for i in range(g.shape[-1]))


def matvec(m: Node, v: Node) -> Node:
    """(C_out x C_in) matrix times (C_in,) vector."""
    if m.value.ndim != 2 or v.value.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"matvec: incompatible shapes {m.shape} and {v.shape}")
    return m.tape.push("matvec", (m.idx, v.idx), m.value @ v.value)


@register_vjp("matvec")
def _matvec_vjp(tape, idx, g):
    im, iv = tape.inputs[idx]
    return np.outer(g, tape.values[iv]), tape.values[im].T @ g
