"""Differentiable primitives.

Every primitive supplies a primal rule, a tangent (forward-mode) rule and a
cotangent (reverse-mode) rule. Tangents arrive as a list aligned with the
inputs, with ``None`` standing for an all-zero tangent.
"""

from __future__ import annotations

import builtins

import numpy as np

from .tensor import Tensor, apply, as_tensor
from . import _kernels


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def jvp(ts):
        ta, tb = ts
        if ta is None:
            return tb
        if tb is None:
            return ta
        return ta + tb

    def vjp(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(g, sb) if b.requires_grad else None,
        )

    return apply("add", (a, b), a.data + b.data, jvp, vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def jvp(ts):
        ta, tb = ts
        if tb is None:
            return ta
        if ta is None:
            return -tb
        return ta - tb

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return apply("sub", (a, b), a.data - b.data, jvp, vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply("neg", (a,), -a.data, lambda ts: -ts[0], lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def jvp(ts):
        ta, tb = ts
        out = 0.0
        if ta is not None:
            out = ta * bd
        if tb is not None:
            out = out + ad * tb
        return out

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return apply("mul", (a, b), ad * bd, jvp, vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def jvp(ts):
        ta, tb = ts
        res = 0.0
        if ta is not None:
            res = ta / bd
        if tb is not None:
            res = res - out * tb / bd
        return res

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return apply("div", (a, b), out, jvp, vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return apply("square", (a,), ad * ad, lambda ts: 2.0 * ad * ts[0], lambda g: (2.0 * ad * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return apply("sqrt", (a,), out, lambda ts: ts[0] * 0.5 / out, lambda g: (g * 0.5 / out,))


def rsqrt(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / np.sqrt(a.data)
    coef = -0.5 * out * out * out
    return apply("rsqrt", (a,), out, lambda ts: ts[0] * coef, lambda g: (g * coef,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")

    def jvp(ts):
        ta, tb = ts
        res = 0.0
        if ta is not None:
            res = _mm(ta, bd)
        if tb is not None:
            res = res + _mm(ad, tb)
        return res

    def vjp(g):
        if bd.ndim == 2 and ad.ndim > 2:
            # weight matrix shared across the batch: one large GEMM
            ga = _mm(g, bd.T) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return apply("matmul", (a, b), _mm(ad, bd), jvp, vjp)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (..., k) @ (k, n) as a single 2-D GEMM
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return a @ b


# ---------------------------------------------------------------- pointwise

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply("exp", (a,), out, lambda ts: ts[0] * out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return apply("log", (a,), np.log(ad), lambda ts: ts[0] / ad, lambda g: (g / ad,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    c = np.cos(ad)
    return apply("sin", (a,), np.sin(ad), lambda ts: ts[0] * c, lambda g: (g * c,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    s = np.sin(ad)
    return apply("cos", (a,), np.cos(ad), lambda ts: -ts[0] * s, lambda g: (-g * s,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    d = 1.0 - out * out
    return apply("tanh", (a,), out, lambda ts: ts[0] * d, lambda g: (g * d,))


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    d = out * (1.0 - out)
    return apply("sigmoid", (a,), out, lambda ts: ts[0] * d, lambda g: (g * d,))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    out = x * s
    d = s * (1.0 + x * (1.0 - s))
    return apply("silu", (a,), out, lambda ts: ts[0] * d, lambda g: (g * d,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    d = _sigmoid(x)
    return apply("softplus", (a,), out, lambda ts: ts[0] * d, lambda g: (g * d,))


def stop_gradient(a) -> Tensor:
    """Identity on values; blocks gradients and tangents."""
    a = as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def expand(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return apply(
        "sum", (a,), out,
        lambda ts: ts[0].sum(axis=axis, keepdims=keepdims),
        lambda g: (expand(g),),
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- structure

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return apply(
        "reshape", (a,), a.data.reshape(shape),
        lambda ts: ts[0].reshape(shape),
        lambda g: (g.reshape(old),),
    )


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return apply(
        "swapaxes", (a,), np.swapaxes(a.data, ax1, ax2),
        lambda ts: np.swapaxes(ts[0], ax1, ax2),
        lambda g: (np.swapaxes(g, ax1, ax2),),
    )


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return apply("getitem", (a,), a.data[index], lambda ts: ts[0][index], vjp)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return builtins.any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    dtype = tensors[0].dtype

    def jvp(ts):
        parts = [np.zeros(t.shape, dtype) if tt is None else tt for t, tt in zip(tensors, ts)]
        return np.concatenate(parts, axis=axis)

    return apply(
        "concat", tensors, np.concatenate([t.data for t in tensors], axis=axis),
        jvp, lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    dtype = tensors[0].dtype

    def jvp(ts):
        parts = [np.zeros(t.shape, dtype) if tt is None else tt for t, tt in zip(tensors, ts)]
        return np.stack(parts, axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return apply("stack", tensors, np.stack([t.data for t in tensors], axis=axis), jvp, vjp)


def flip(a, axis: int = 1) -> Tensor:
    """Sequence reversal along ``axis`` (time for B x T x C tensors)."""
    a = as_tensor(a)
    return apply(
        "flip", (a,), np.flip(a.data, axis=axis).copy(),
        lambda ts: np.flip(ts[0], axis=axis),
        lambda g: (np.flip(g, axis=axis),),
    )


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return apply(
        "broadcast_to", (a,), np.broadcast_to(a.data, shape).copy(),
        lambda ts: np.broadcast_to(ts[0], shape),
        lambda g: (_unbroadcast(g, old),),
    )


# ---------------------------------------------------------------- sequence ops

def depthwise_conv1d(x, weight, bias) -> Tensor:
    """Causal depthwise convolution over time.

    x: (B, T, C), weight: (K, C), bias: (C,). Output frame t sees input
    frames t-K+1 .. t, zero-padded at the start.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xd, wd = x.data, weight.data
    K = wd.shape[0]
    T = xd.shape[1]
    xp = np.pad(xd, ((0, 0), (K - 1, 0), (0, 0)))
    out = np.broadcast_to(bias.data, xd.shape).copy()
    for k in range(K):
        out += wd[k] * xp[:, k:k + T]

    def jvp(ts):
        tx, tw, tb = ts
        res = np.zeros_like(out)
        if tx is not None:
            txp = np.pad(tx, ((0, 0), (K - 1, 0), (0, 0)))
            for k in range(K):
                res += wd[k] * txp[:, k:k + T]
        if tw is not None:
            for k in range(K):
                res += tw[k] * xp[:, k:k + T]
        if tb is not None:
            res += tb
        return res

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for k in range(K):
            gxp[:, k:k + T] += g * wd[k]
            gw[k] = (g * xp[:, k:k + T]).sum(axis=(0, 1))
        return gxp[:, K - 1:], gw, g.sum(axis=(0, 1))

    return apply("depthwise_conv1d", (x, weight, bias), out, jvp, vjp)


def ssm_scan(u, delta, A, B, C) -> Tensor:
    """Selective state-space scan with zero-order-hold discretisation.

    u, delta: (batch, T, channels); A: (channels, d_state), negative;
    B, C: (batch, T, d_state). Returns y of shape (batch, T, channels) with
    h_t = exp(delta_t A) h_{t-1} + Bbar_t u_t and y_t = C_t . h_t.
    """
    u, delta, A, B, C = (as_tensor(v) for v in (u, delta, A, B, C))
    args = tuple(np.ascontiguousarray(v.data) for v in (u, delta, A, B, C))
    em1 = _kernels.decay_expm1(args[1], args[2])
    y, H = _kernels.scan_forward(*args, em1)

    def jvp(ts):
        tangents = (
            np.zeros_like(ref) if t is None else np.ascontiguousarray(t, dtype=ref.dtype)
            for t, ref in zip(ts, args)
        )
        return _kernels.scan_tangent(*args, em1, *tangents)

    def vjp(g):
        return _kernels.scan_backward(*args, em1, H, np.ascontiguousarray(g, dtype=H.dtype))

    return apply("ssm_scan", (u, delta, A, B, C), y, jvp, vjp)


def sinusoidal(t, dim: int, max_freq: float = 64.0) -> Tensor:
    """Interleaved [sin, cos] features of a batch of scalar times.

    t: (batch,). Frequencies are geometric from 1 to ``max_freq`` rad per unit
    time, so t=0 maps to [0, 1, 0, 1, ...].
    """
    if dim % 2:
        raise ValueError("sinusoidal embedding dim must be even")
    t = as_tensor(t)
    freqs = sinusoidal_freqs(dim, max_freq).astype(t.dtype)
    ang = t.data[:, None] * freqs[None, :]
    s, c = np.sin(ang), np.cos(ang)
    out = np.empty(t.shape + (dim,), dtype=t.dtype)
    out[:, 0::2] = s
    out[:, 1::2] = c
    dout = np.empty_like(out)
    dout[:, 0::2] = c * freqs
    dout[:, 1::2] = -s * freqs

    def jvp(ts):
        return ts[0][:, None] * dout

    return apply("sinusoidal", (t,), out, jvp, lambda g: ((g * dout).sum(axis=1),))


def sinusoidal_freqs(dim: int, max_freq: float = 64.0) -> np.ndarray:
    half = dim // 2
    if half == 1:
        return np.ones(1)
    return max_freq ** (np.arange(half) / (half - 1))


# ---------------------------------------------------------------- composites

def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def rms_norm(x, scale, eps: float = 1e-5) -> Tensor:
    inv = rsqrt(add(mean(square(x), axis=-1, keepdims=True), eps))
    return mul(mul(x, inv), scale)


def cross(a, b) -> Tensor:
    """Cross product over the last axis (length 3)."""
    a0, a1, a2 = a[..., 0:1], a[..., 1:2], a[..., 2:3]
    b0, b1, b2 = b[..., 0:1], b[..., 1:2], b[..., 2:3]
    return concat([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def normalize(a, axis: int = -1) -> Tensor:
    return mul(a, rsqrt(sum(square(a), axis=axis, keepdims=True)))


def mse(a, b) -> Tensor:
    return mean(square(sub(a, b)))
