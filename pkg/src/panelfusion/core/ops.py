"""Differentiable primitives used by the U-Net, autoencoder, LoRA and text towers."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError
from .tensor import Tensor, check_shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def bw(g):
        return g @ y.T, x.T @ g

    return Tensor._from_op(x @ y, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out_features, in_features)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: x {x.shape}, W {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    parents: tuple = (x, w)
    if b is not None:
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._from_op(out, parents, bw, "linear")


def _conv_out(size: int, k: int, stride: int, padding: int, what: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv2d: non-integral output {what} ({size}+2*{padding}-{k})/{stride}+1"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in x H x W map with a C_out x C_in x kH x kW kernel."""
    check_shape(x, 3, "conv2d input")
    check_shape(w, 4, "conv2d kernel")
    cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    oh = _conv_out(h, kh, stride, padding, "height")
    ow = _conv_out(wdt, kw, stride, padding, "width")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (cin, oh, ow, kh, kw) -> (cin*kh*kw, oh*ow)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(cin * kh * kw, oh * ow)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(cout, oh, ow)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(cin, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, i, j]
            gx = gxp[:, padding : padding + h, padding : padding + wdt] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return Tensor._from_op(out, parents, bw, "conv2d")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))

    def bw(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return Tensor._from_op(xd * sig, (x,), bw, "silu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), bw, "log_softmax")


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v for q: n x d, k: m x d, v: m x h."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(f"attention expects 2-D q/k/v, got {q.shape}, {k.shape}, {v.shape}")
    n, d = q.shape
    m = k.shape[0]
    if n == 0 or m == 0 or d == 0:
        raise DimensionError(f"attention over empty sequence: q {q.shape}, k {k.shape}")
    if k.shape[1] != d or v.shape[0] != m:
        raise DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / math.sqrt(d)
    qd, kd, vd = q.data, k.data, v.data
    logits = (qd @ kd.T) * scale
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    out = p @ vd

    def bw(g):
        gv = p.T @ g
        gp = g @ vd.T
        gl = p * (gp - (gp * p).sum(axis=1, keepdims=True)) * scale
        return gl @ kd, gl.T @ qd, gv

    return Tensor._from_op(out, (q, k, v), bw, "attention")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel group of a C x H x W map, then apply per-channel affine."""
    check_shape(x, 3, "group_norm input")
    c = x.shape[0]
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    gd = gamma.data.reshape(c, 1, 1)
    out = xhat * gd + beta.data.reshape(c, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(1, 2)).reshape(gamma.shape)
        gbeta = g.sum(axis=(1, 2)).reshape(beta.shape)
        gh = (g * gd).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xh * (gh * xh).mean(axis=1, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), bw, "group_norm")


def embed(ids, table: Tensor) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise DimensionError(f"embed: ids out of range for table with {v} rows")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor._from_op(table.data[idx], (table,), bw, "embed")


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = g * (2.0 / n) * diff
        return ga, -ga

    return Tensor._from_op(np.asarray((diff * diff).mean()), (a, b), bw, "mse")


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cosine_sim shape mismatch: {a.shape} vs {b.shape}")
    x, y = a.data.ravel(), b.data.ravel()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise NumericError("cosine_sim of a zero-norm vector")
    dot = x @ y
    c = dot / (nx * ny)

    def bw(g):
        ga = g * (y / (nx * ny) - c * x / (nx * nx))
        gb = g * (x / (nx * ny) - c * y / (ny * ny))
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return Tensor._from_op(np.asarray(c, dtype=a.dtype), (a, b), bw, "cosine_sim")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise NumericError("l2_normalize of a zero-norm row")
    out = xd / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._from_op(out, (x,), bw, "l2_normalize")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    tgt = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits, axis=1)
    rows = np.arange(len(tgt))
    return -(lp[rows, tgt].mean())


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return np.split(g, splits, axis=axis)

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of a C x H x W map."""
    check_shape(x, 3, "upsample2x input")
    c, h, w = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def bw(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return Tensor._from_op(out, (x,), bw, "upsample2x")


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 average pooling of a C x H x W map (H, W even)."""
    check_shape(x, 3, "avg_pool2x input")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2x needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return Tensor._from_op(out, (x,), bw, "avg_pool2x")
