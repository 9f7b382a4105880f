"""Differentiable 3D network primitives: convolution, batch norm, pooling,
trilinear resize, and the conv+BN+ReLU unit the whole network is built from.

Feature tensors are laid out (batch, channels, H, W, D), row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import Node, Tape, register_vjp, relu

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected an int or a triple, got {v!r}")
    return t


def _conv_view(xp: np.ndarray, kshape, stride):
    """Strided sliding-window view (N, Cin, o0, o1, o2, k0, k1, k2) of padded input."""
    n, c = xp.shape[:2]
    k = kshape
    s = stride
    out = tuple((xp.shape[2 + i] - k[i]) // s[i] + 1 for i in range(3))
    st = xp.strides
    view = as_strided(
        xp,
        shape=(n, c) + out + k,
        strides=(st[0], st[1], st[2] * s[0], st[3] * s[1], st[4] * s[2], st[2], st[3], st[4]),
        writeable=False,
    )
    return view, out


def conv3d(x: Node, kernel: Node, bias: Node, stride=(1, 1, 1), padding=(0, 0, 0)) -> Node:
    """Cross-correlation of (N, Cin, H, W, D) with (Cout, Cin, k0, k1, k2) plus bias.

    Output spatial extent per axis is floor((in + 2*pad - k)/stride) + 1.
    """
    stride = _triple(stride)
    padding = _triple(padding)
    xv, kv, bv = x.value, kernel.value, bias.value
    if xv.ndim != 5:
        raise ValueError(f"conv3d input must be 5-d (N,C,H,W,D), got shape {x.shape}")
    if kv.ndim != 5:
        raise ValueError(f"conv3d kernel must be 5-d (Cout,Cin,k,k,k), got shape {kernel.shape}")
    if kv.shape[1] != xv.shape[1]:
        raise ValueError(
            f"conv3d channel axis mismatch: kernel expects {kv.shape[1]} input channels, input has {xv.shape[1]}")
    if bv.shape != (kv.shape[0],):
        raise ValueError(f"conv3d bias shape {bias.shape} does not match {kv.shape[0]} output channels")
    if any(s < 1 for s in stride):
        raise ValueError(f"conv3d stride must be >= 1 per axis, got {stride}")
    for ax in range(3):
        if xv.shape[2 + ax] + 2 * padding[ax] < kv.shape[2 + ax]:
            raise ValueError(
                f"conv3d spatial axis {ax}: padded extent {xv.shape[2 + ax] + 2 * padding[ax]} "
                f"smaller than kernel extent {kv.shape[2 + ax]} (zero-size output)")

    p0, p1, p2 = padding
    xp = np.pad(xv, ((0, 0), (0, 0), (p0, p0), (p1, p1), (p2, p2)))
    view, out_sp = _conv_view(xp, kv.shape[2:], stride)
    out = np.tensordot(view, kv, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    out += bv.reshape(1, -1, 1, 1, 1)
    ctx = (stride, padding, out_sp)
    return x.tape.push("conv3d", (x.idx, kernel.idx, bias.idx), out, ctx=ctx)


@register_vjp("conv3d")
def _conv3d_vjp(tape, idx, g):
    ix, ik, _ = tape.inputs[idx]
    stride, padding, out_sp = tape.ctxs[idx]
    xv, kv = tape.values[ix], tape.values[ik]
    p0, p1, p2 = padding
    s0, s1, s2 = stride
    k0, k1, k2 = kv.shape[2:]
    o0, o1, o2 = out_sp

    grad_bias = g.sum(axis=(0, 2, 3, 4))

    xp = np.pad(xv, ((0, 0), (0, 0), (p0, p0), (p1, p1), (p2, p2)))
    view, _ = _conv_view(xp, kv.shape[2:], stride)
    # g: (N, Cout, o0, o1, o2); view: (N, Cin, o0, o1, o2, k0, k1, k2)
    grad_kernel = np.tensordot(g, view, axes=([0, 2, 3, 4], [0, 2, 3, 4]))

    # scatter grad through each kernel offset back onto the padded input
    gm = np.tensordot(g, kv, axes=([1], [0]))        # (N, o0, o1, o2, Cin, k0, k1, k2)
    gm = np.moveaxis(gm, 4, 1)                        # (N, Cin, o0, o1, o2, k0, k1, k2)
    gx = np.zeros_like(xp)
    for i in range(k0):
        for j in range(k1):
            for l in range(k2):
                gx[:, :, i:i + o0 * s0:s0, j:j + o1 * s1:s1, l:l + o2 * s2:s2] += gm[..., i, j, l]
    if p0 or p1 or p2:
        gx = gx[:, :, p0:gx.shape[2] - p0, p1:gx.shape[3] - p1, p2:gx.shape[4] - p2]
    return np.ascontiguousarray(gx), grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm_train(x: Node, gamma: Node, beta: Node, eps: float = BN_EPS):
    """Normalize per channel over batch+spatial axes with mini-batch statistics.

    Returns (out, batch_mean, batch_var); the caller owns the running-stat update.
    """
    v = x.value
    axes = (0, 2, 3, 4)
    mean = v.mean(axis=axes)
    var = v.var(axis=axes)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (v - mean.reshape(1, -1, 1, 1, 1)) * invstd.reshape(1, -1, 1, 1, 1)
    out = gamma.value.reshape(1, -1, 1, 1, 1) * xhat + beta.value.reshape(1, -1, 1, 1, 1)
    node = x.tape.push("batchnorm_train", (x.idx, gamma.idx, beta.idx),
                       out.astype(x.tape.dtype, copy=False), ctx=(xhat, invstd))
    return node, mean, var


@register_vjp("batchnorm_train")
def _bn_train_vjp(tape, idx, g):
    _, igamma, _ = tape.inputs[idx]
    xhat, invstd = tape.ctxs[idx]
    gamma = tape.values[igamma]
    axes = (0, 2, 3, 4)
    m = g.shape[0] * g.shape[2] * g.shape[3] * g.shape[4]
    dbeta = g.sum(axis=axes)
    dgamma = (g * xhat).sum(axis=axes)
    dxhat = g * gamma.reshape(1, -1, 1, 1, 1)
    t1 = dxhat.sum(axis=axes, keepdims=True)
    t2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    dx = (invstd.reshape(1, -1, 1, 1, 1) / m) * (m * dxhat - t1 - xhat * t2)
    return dx, dgamma, dbeta


def batchnorm_eval(x: Node, gamma: Node, beta: Node,
                   running_mean: np.ndarray, running_var: np.ndarray,
                   eps: float = BN_EPS) -> Node:
    """Normalize with fixed running statistics (affine in x)."""
    if np.any(running_var <= 0):
        raise ValueError("batchnorm_eval: running variance must be strictly positive")
    invstd = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.value - running_mean.reshape(1, -1, 1, 1, 1)) * invstd.reshape(1, -1, 1, 1, 1)
    out = gamma.value.reshape(1, -1, 1, 1, 1) * xhat + beta.value.reshape(1, -1, 1, 1, 1)
    return x.tape.push("batchnorm_eval", (x.idx, gamma.idx, beta.idx),
                       out.astype(x.tape.dtype, copy=False), ctx=(xhat, invstd))


@register_vjp("batchnorm_eval")
def _bn_eval_vjp(tape, idx, g):
    _, igamma, _ = tape.inputs[idx]
    xhat, invstd = tape.ctxs[idx]
    gamma = tape.values[igamma]
    axes = (0, 2, 3, 4)
    dbeta = g.sum(axis=axes)
    dgamma = (g * xhat).sum(axis=axes)
    dx = g * (gamma * invstd).reshape(1, -1, 1, 1, 1)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool3d(x: Node, window=(2, 2, 2), stride=None) -> Node:
    """Max over sliding windows; non-divisible extents use floor semantics.

    Backward routes the gradient to the first maximal element of each window
    (lowest flat index within the window, row-major).
    """
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    xv = x.value
    if xv.ndim != 5:
        raise ValueError(f"maxpool3d input must be 5-d, got shape {x.shape}")
    for ax in range(3):
        if window[ax] > xv.shape[2 + ax]:
            raise ValueError(
                f"maxpool3d window {window[ax]} exceeds input extent {xv.shape[2 + ax]} on spatial axis {ax}")
    view, out_sp = _conv_view(xv, window, stride)
    n, c = xv.shape[:2]
    flat = view.reshape(n, c, *out_sp, -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    ctx = (arg, xv.shape, window, stride, out_sp)
    return x.tape.push("maxpool3d", (x.idx,), np.ascontiguousarray(out), ctx=ctx)


@register_vjp("maxpool3d")
def _maxpool3d_vjp(tape, idx, g):
    arg, xshape, window, stride, out_sp = tape.ctxs[idx]
    w0, w1, w2 = window
    s0, s1, s2 = stride
    wi = arg // (w1 * w2)
    wj = (arg // w2) % w1
    wl = arg % w2
    n, c = xshape[:2]
    o0, o1, o2 = out_sp
    ni, ci, oi, oj, ol = np.ix_(np.arange(n), np.arange(c), np.arange(o0), np.arange(o1), np.arange(o2))
    gx = np.zeros(xshape, dtype=g.dtype)
    np.add.at(gx, (ni, ci, oi * s0 + wi, oj * s1 + wj, ol * s2 + wl), g)
    return (gx,)


# ---------------------------------------------------------------------------
# trilinear resize
# ---------------------------------------------------------------------------

def _axis_plan(in_n: int, out_n: int):
    """Source indices and blend weights for 1-d linear resize, half-pixel centers."""
    pos = (np.arange(out_n, dtype=np.float64) + 0.5) * (in_n / out_n) - 0.5
    pos = np.clip(pos, 0.0, in_n - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_n - 1)
    w = pos - i0
    return i0, i1, w


def _axis_resize(arr: np.ndarray, axis: int, plan) -> np.ndarray:
    i0, i1, w = plan
    shape = [1] * arr.ndim
    shape[axis] = len(w)
    wv = w.reshape(shape).astype(arr.dtype)
    return arr.take(i0, axis=axis) * (1 - wv) + arr.take(i1, axis=axis) * wv


def _axis_resize_t(g: np.ndarray, axis: int, in_n: int, plan) -> np.ndarray:
    """Transpose of _axis_resize: scatter-add output grads back to input slots."""
    i0, i1, w = plan
    gm = np.moveaxis(g, axis, -1)
    lead = gm.shape[:-1]
    gm2 = gm.reshape(-1, gm.shape[-1])
    out = np.zeros((gm2.shape[0], in_n), dtype=g.dtype)
    wv = w.astype(g.dtype)
    np.add.at(out, (slice(None), i0), gm2 * (1 - wv))
    np.add.at(out, (slice(None), i1), gm2 * wv)
    return np.moveaxis(out.reshape(*lead, in_n), -1, axis)


def resize_trilinear(x: Node, target_spatial) -> Node:
    """Resize the three trailing spatial axes by separable linear interpolation.

    Uses half-pixel (align-corners-false) source coordinates; a target equal to
    the source is a bit-identical copy.
    """
    target = _triple(target_spatial)
    if any(t < 1 for t in target):
        raise ValueError(f"resize target extents must be >= 1, got {target}")
    xv = x.value
    if xv.ndim != 5:
        raise ValueError(f"resize_trilinear input must be 5-d, got shape {x.shape}")
    plans = []
    out = xv
    for ax in range(3):
        in_n, out_n = xv.shape[2 + ax], target[ax]
        if in_n == out_n:
            plans.append(None)
            continue
        plan = _axis_plan(in_n, out_n)
        plans.append(plan)
        out = _axis_resize(out, 2 + ax, plan)
    if out is xv:
        out = xv.copy()
    ctx = (xv.shape, plans)
    return x.tape.push("resize_trilinear", (x.idx,), np.ascontiguousarray(out), ctx=ctx)


@register_vjp("resize_trilinear")
def _resize_vjp(tape, idx, g):
    xshape, plans = tape.ctxs[idx]
    out = g
    for ax in (2, 1, 0):
        if plans[ax] is None:
            continue
        out = _axis_resize_t(out, 2 + ax, xshape[2 + ax], plans[ax])
    return (out,)


# ---------------------------------------------------------------------------
# conv unit = conv3d -> batch norm -> ReLU
# ---------------------------------------------------------------------------

@dataclass
class ConvUnitParams:
    """Parameter block of one convolutional unit.

    kernel/bias/bn_gamma/bn_beta may be numpy arrays (lifted onto the tape per
    call) or already-recorded Nodes. Running statistics are plain arrays,
    mutated in place when a train-mode pass updates them.
    """
    kernel: object
    bias: object
    bn_gamma: object
    bn_beta: object
    bn_running_mean: np.ndarray = field(default=None)
    bn_running_var: np.ndarray = field(default=None)


def _as_node(tape: Tape, v) -> Node:
    return v if isinstance(v, Node) else tape.leaf(v)


def conv_unit(x: Node, params: ConvUnitParams, stride=(1, 1, 1), padding=(1, 1, 1),
              mode: str = "train", momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
              update_running: bool = True) -> Node:
    """conv3d -> batch norm -> ReLU. All outputs are >= 0.

    In train mode the batch statistics normalize the activations and, when
    `update_running` is set, decay into the stored running statistics. Eval
    mode uses the stored statistics as-is (initialized mean 0 / var 1).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"conv_unit mode must be 'train' or 'eval', got {mode!r}")
    tape = x.tape
    k = _as_node(tape, params.kernel)
    b = _as_node(tape, params.bias)
    gamma = _as_node(tape, params.bn_gamma)
    beta = _as_node(tape, params.bn_beta)
    y = conv3d(x, k, b, stride=stride, padding=padding)
    if mode == "train":
        y, mean, var = batchnorm_train(y, gamma, beta, eps=eps)
        if update_running:
            rm, rv = params.bn_running_mean, params.bn_running_var
            rm *= 1.0 - momentum
            rm += momentum * mean.astype(rm.dtype)
            rv *= 1.0 - momentum
            rv += momentum * var.astype(rv.dtype)
    else:
        y = batchnorm_eval(y, gamma, beta, params.bn_running_mean, params.bn_running_var, eps=eps)
    return relu(y)


def init_conv_unit(rng: np.random.Generator, in_ch: int, out_ch: int, ksize=3) -> ConvUnitParams:
    """Uniform kernel init with bound sqrt(6 / fan_in); zero bias; identity BN."""
    ks = _triple(ksize)
    fan_in = in_ch * ks[0] * ks[1] * ks[2]
    bound = np.sqrt(6.0 / fan_in)
    kernel = rng.uniform(-bound, bound, size=(out_ch, in_ch) + ks).astype(np.float32)
    return ConvUnitParams(
        kernel=kernel,
        bias=np.zeros(out_ch, dtype=np.float32),
        bn_gamma=np.ones(out_ch, dtype=np.float32),
        bn_beta=np.zeros(out_ch, dtype=np.float32),
        bn_running_mean=np.zeros(out_ch, dtype=np.float32),
        bn_running_var=np.ones(out_ch, dtype=np.float32),
    )


def init_plain_conv(rng: np.random.Generator, in_ch: int, out_ch: int, ksize=1):
    """Kernel/bias pair for heads that emit logits (no BN, no ReLU)."""
    ks = _triple(ksize)
    fan_in = in_ch * ks[0] * ks[1] * ks[2]
    bound = np.sqrt(6.0 / fan_in)
    kernel = rng.uniform(-bound, bound, size=(out_ch, in_ch) + ks).astype(np.float32)
    return kernel, np.zeros(out_ch, dtype=np.float32)
