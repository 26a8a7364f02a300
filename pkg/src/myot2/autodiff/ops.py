"""Differentiable operations on :class:`Tensor`.

Binary elementwise ops accept equal shapes, a Python scalar, or a right-hand
operand whose shape is a trailing suffix of the left-hand one (bias style).
Nothing more general is broadcast.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, record

# ---------------------------------------------------------------------------
# elementwise


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead < 0 or g.shape[lead:] != shape:
        raise ValueError(f"cannot reduce gradient {g.shape} to {shape}")
    return g.sum(axis=tuple(range(lead)))


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or b.ndim == 0 or a.ndim == 0:
        return
    if b.ndim < a.ndim and sa[a.ndim - b.ndim:] == sb:
        return
    if a.ndim < b.ndim and sb[b.ndim - a.ndim:] == sa:
        return
    raise ValueError(f"{op}: shape mismatch {sa} vs {sb}")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_pair("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_pair("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_pair("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_pair("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _reduce_to(ga, ad.shape), _reduce_to(-ga * out, bd.shape)

    return record("div", (a, b), out, vjp)


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record("log", (a,), np.log(ad), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# reductions and shape


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), a.data.transpose(axes),
                  lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record("concat", tuple(tensors), out,
                  lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product. Gradients dA = dC Bᵀ and dB = Aᵀ dC."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the leading axis: [B,M,K] @ [B,K,P]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return record("bmm", (a, b), np.matmul(ad, bd),
                  lambda g: (np.matmul(g, bd.transpose(0, 2, 1)),
                             np.matmul(ad.transpose(0, 2, 1), g)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., Din] @ weight[Din, Dout] (+ bias[Dout])``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: {x.shape} incompatible with weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        if bias.shape != (wd.shape[1],):
            raise ValueError(f"linear: bias {bias.shape} vs {wd.shape[1]} outputs")
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", inputs, out, vjp)


# ---------------------------------------------------------------------------
# convolution and resampling


def _im2col(xd: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N*Ho*Wo, C*k*k) patch matrix."""
    n, c = xd.shape[:2]
    if k == 1 and stride == 1 and pad == 0:
        return xd.transpose(0, 2, 3, 1).reshape(-1, c)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, c * k * k)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,k,k].

    The output extent (H + 2·pad − k)/stride + 1 must divide exactly.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd extent, got {k}x{k2}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    span_h, span_w = h + 2 * pad - k, w + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(f"conv2d: output extent for {h}x{w}, k={k}, pad={pad}, "
                         f"stride={stride} is not exact")
    ho, wo = span_h // stride + 1, span_w // stride + 1
    wmat = kernel.data.reshape(cout, -1)
    cols = _im2col(x.data, k, stride, pad)
    out = cols @ wmat.T
    if bias is not None:
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias {bias.shape} vs {cout} output channels")
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(kernel.shape)
        if stride == 1 and k - 1 - pad >= 0:
            # input gradient = full correlation of g with the flipped kernel
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gcols = _im2col(np.ascontiguousarray(g), k, 1, k - 1 - pad)
            gx = np.ascontiguousarray(
                (gcols @ flipped.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2))
        else:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", inputs, out, vjp)


def sandwich(x: Tensor, left: np.ndarray, right: np.ndarray) -> Tensor:
    """Apply fixed linear maps to the last two axes: ``left @ x @ right.T``."""
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if x.shape[-2] != left.shape[1] or x.shape[-1] != right.shape[1]:
        raise ValueError(f"sandwich: {x.shape} vs maps {left.shape}, {right.shape}")
    out = np.matmul(np.matmul(left, x.data), right.T)
    return record("sandwich", (x,), out,
                  lambda g: (np.matmul(np.matmul(left.T, g), right),))


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix for half-pixel (align_corners=False) sampling."""
    mat = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        mat[i, i0] += 1.0 - lam
        mat[i, i1] += lam
    return mat


_BILINEAR_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _bilinear_cached(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    if key not in _BILINEAR_CACHE:
        _BILINEAR_CACHE[key] = bilinear_matrix(n_in, n_out)
    return _BILINEAR_CACHE[key]


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: output extents must be >= 1")
    if x.ndim != 4:
        raise ValueError(f"bilinear_resize expects [N,C,H,W], got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    return sandwich(x, _bilinear_cached(h, out_h), _bilinear_cached(w, out_w))


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    ho, wo = h // factor, w // factor
    out = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))
    scale = 1.0 / (factor * factor)

    def vjp(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] * scale, (n, c, ho, factor, wo, factor))
        return (gx.reshape(n, c, h, w),)

    return record("avg_pool2d", (x,), out, vjp)


# ---------------------------------------------------------------------------
# normalization, activation, regularization


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be > 0")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: feature size {d} vs gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", (x, gain, bias), out, vjp)


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over (N, H, W) of the current batch."""
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if n * h * w < 2:
        raise ValueError("batch_norm needs at least two values per channel")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ValueError(f"batch_norm: {c} channels vs gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(0, 2, 3), keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data.reshape(1, c, 1, 1)
    out = xhat * gd + bias.data.reshape(1, c, 1, 1)

    def vjp(g):
        ax = (0, 2, 3)
        dxhat = g * gd
        gx = inv * (dxhat - dxhat.mean(axis=ax, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True))
        return gx, (g * xhat).sum(axis=ax), g.sum(axis=ax)

    return record("batch_norm", (x, gain, bias), out, vjp)


def softmax_lastaxis(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return record("softmax", (x,), out,
                  lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def dropout(x: Tensor, p: float, seed: int, training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= p
    scale = keep / (1.0 - p)
    return record("dropout", (x,), x.data * scale, lambda g: (g * scale,))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pixel-mean cross-entropy of [N,K,H,W] logits against [N,H,W] labels."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, labels[:, None].astype(np.intp), 1.0, axis=1)
    count = n * h * w
    loss = -(onehot * logp).sum() / count

    def vjp(g):
        return (g * (np.exp(logp) - onehot) / count,)

    return record("softmax_xent", (logits,), np.asarray(loss), vjp)


# ---------------------------------------------------------------------------
# composite


def multi_head_attention(x: Tensor, heads: int, params: dict[str, Tensor],
                         return_weights: bool = False):
    """Scaled dot-product self-attention over [N,T,D] tokens.

    ``params`` holds ``wq, wk, wv, wo`` ([D,D]) and ``bo`` ([D]).
    """
    n, t, d = x.shape
    if heads < 1 or d % heads:
        raise ValueError(f"embedding size {d} not divisible by {heads} heads")
    dh = d // heads

    def split(z: Tensor) -> Tensor:
        z = reshape(z, (n, t, heads, dh))
        z = transpose(z, (0, 2, 1, 3))
        return reshape(z, (n * heads, t, dh))

    q = split(linear(x, params["wq"]))
    k = split(linear(x, params["wk"]))
    v = split(linear(x, params["wv"]))
    scores = mul(bmm(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = softmax_lastaxis(scores)
    ctx = bmm(attn, v)
    ctx = reshape(transpose(reshape(ctx, (n, heads, t, dh)), (0, 2, 1, 3)), (n, t, d))
    out = linear(ctx, params["wo"], params.get("bo"))
    if return_weights:
        return out, attn.data.reshape(n, heads, t, t)
    return out


__all__ = [
    "add", "sub", "mul", "div", "neg", "exp", "log", "square", "relu", "sigmoid",
    "sum", "mean", "reshape", "transpose", "concat", "matmul", "bmm", "linear",
    "conv2d", "sandwich", "bilinear_matrix", "bilinear_resize", "avg_pool2d",
    "layer_norm", "batch_norm", "softmax_lastaxis", "dropout",
    "softmax_cross_entropy", "multi_head_attention", "as_tensor",
]
