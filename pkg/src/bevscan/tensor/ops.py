"""Differentiable operations on :class:`Tensor`.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes or a 0-d scalar operand. Per-channel bias and scaling have their own
ops, and size-1 axes are tiled explicitly with :func:`expand`.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .core import ShapeError, Tensor, as_tensor, make_result


def _scalar_like(v, ref: np.ndarray) -> Tensor:
    return Tensor(np.asarray(v, dtype=ref.dtype))


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _scalar_like(a, b.data)
    if not isinstance(b, Tensor):
        b = _scalar_like(b, a.data)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape} (only scalar broadcasting is supported)")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data
    return make_result(out, (a, b),
                       lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def absolute(x: Tensor) -> Tensor:
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


# activations ------------------------------------------------------------

def _sigmoid(v: np.ndarray) -> np.ndarray:
    return expit(v)


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, v).astype(v.dtype, copy=False)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(x.data * s, (x,), lambda g: (g * (s * (1 + x.data * (1 - s))),))


def softplus(x: Tensor) -> Tensor:
    return make_result(_softplus(x.data), (x,), lambda g: (g * _sigmoid(x.data),))


def hsigmoid(x: Tensor) -> Tensor:
    """ReLU6(x + 3) / 6, with zero subgradient at both kinks."""
    v = x.data
    inside = (v > -3) & (v < 3)
    out = np.clip(v + 3.0, 0.0, 6.0) / 6.0
    return make_result(out, (x,), lambda g: (g * inside / 6.0,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_result(t, (x,), lambda g: (g * (1 - t * t),))


# shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    nd = xs[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat axis {axis} out of range for rank {nd}")
    axis = axis % nd
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise ShapeError(f"cannot concat shapes {ref} and {x.shape} along axis {axis}")
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return make_result(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return make_result(x.data[idx].copy(), (x,), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, axis))
        start += s
    return out


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis``; with a permutation this reorders tokens."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    unique = np.unique(indices).size == indices.size

    def backward(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        if unique:
            moved[indices] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (gx,)

    return make_result(np.take(x.data, indices, axis=axis), (x,), backward)


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Tile a size-1 axis ``n`` times."""
    axis = axis % x.ndim
    if x.shape[axis] != 1:
        raise ShapeError(f"expand needs a size-1 axis, got extent {x.shape[axis]} at axis {axis}")
    return make_result(np.repeat(x.data, n, axis=axis), (x,),
                       lambda g: (g.sum(axis=axis, keepdims=True),))


# reductions -------------------------------------------------------------

def sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                           lambda g: (np.full(x.shape, g, dtype=x.dtype),))
    out = x.data.sum(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_result(out, (x,), backward)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis), 1.0 / n)


# linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return make_result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a per-channel bias ``b`` (shape ``(x.shape[axis],)``) along ``axis``."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias shape {b.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    return make_result(x.data + b.data.reshape(shape), (x, b), lambda g: (g, g.sum(axis=other)))


def scale_channels(x: Tensor, w: Tensor) -> Tensor:
    """Multiply ``x[b, c, ...]`` by ``w[b, c]``."""
    if w.ndim != 2 or w.shape != x.shape[:2]:
        raise ShapeError(f"channel weights {w.shape} do not match leading dims of {x.shape}")
    shape = w.shape + (1,) * (x.ndim - 2)
    wb = w.data.reshape(shape)
    red = tuple(range(2, x.ndim))
    return make_result(x.data * wb, (x, w), lambda g: (g * wb, (g * x.data).sum(axis=red)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Token-wise projection: ``x`` (L, in) times ``w`` (in, out) plus bias."""
    y = matmul(x, w)
    return add_bias(y, b, -1) if b is not None else y


def sparse_matmul(s, x: Tensor, s_t=None) -> Tensor:
    """Constant sparse matrix ``s`` times dense ``x`` (n, d)."""
    if s.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse matmul dimension mismatch: {s.shape} @ {x.shape}")
    s_t = s.T.tocsr() if s_t is None else s_t
    out = np.asarray(s @ x.data, dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.asarray(s_t @ g, dtype=x.dtype),))


# convolution ------------------------------------------------------------

def _pad_hw(v: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return v
    return np.pad(v, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B, C, H, W) with ``w`` (O, C, kh, kw), zero padded."""
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xd, wdat = x.data, w.data

    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        out = np.einsum("bchw,oc->bohw", xs, wdat[:, :, 0, 0], optimize=True)

        def backward(g):
            gw = np.einsum("bohw,bchw->oc", g, xs, optimize=True)[:, :, None, None]
            gxs = np.einsum("bohw,oc->bchw", g, wdat[:, :, 0, 0], optimize=True)
            if stride > 1:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = gxs
            else:
                gx = gxs
            return gx, gw
    else:
        xp = _pad_hw(xd, padding)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # channels-first im2col: rows (c, i, j), columns (b, y, x)
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, bsz * ho * wo)
        wmat = wdat.reshape(o, c * kh * kw)
        out = (wmat @ cols).reshape(o, bsz, ho, wo).transpose(1, 0, 2, 3)

        def backward(g):
            gmat = g.transpose(1, 0, 2, 3).reshape(o, bsz * ho * wo)
            gw = (gmat @ cols.T).reshape(w.shape)
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, bsz, ho, wo)
            gxp = np.zeros((c, bsz, hp, wp), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
            return np.ascontiguousarray(gx), gw

    out = np.ascontiguousarray(out)
    if b is None:
        return make_result(out, (x, w), backward)
    y = make_result(out, (x, w), backward)
    return add_bias(y, b, 1)


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution of ``x`` (B, d, L) with ``w`` (d, k).

    ``y[:, c, t] = sum_j w[c, j] * x[:, c, t - (k - 1) + j]`` with zeros
    before the sequence start, so the output never sees future positions.
    """
    if w.ndim != 2 or w.shape[1] < 1:
        raise ShapeError(f"kernel width must be >= 1, got kernel shape {w.shape}")
    if x.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv1d shape mismatch: input {x.shape}, kernel {w.shape}")
    k = w.shape[1]
    length = x.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (k - 1, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += w.data[None, :, j:j + 1] * xp[:, :, j:j + length]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gxp[:, :, j:j + length] += w.data[None, :, j:j + 1] * g
            gw[:, j] = (g * xp[:, :, j:j + length]).sum(axis=(0, 2))
        return gxp[:, :, k - 1:], gw

    y = make_result(out, (x, w), backward)
    return add_bias(y, b, 1) if b is not None else y


# pooling / resampling -------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    hw = x.shape[2] * x.shape[3]
    return make_result(x.data.mean(axis=(2, 3)), (x,),
                       lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))


def channel_max(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, 1, H, W); ties route the gradient to the lowest channel."""
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return make_result(out, (x,), backward)


def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[1]
    return make_result(x.data.mean(axis=1, keepdims=True), (x,),
                       lambda g: (np.broadcast_to(g / c, x.shape).copy(),))


def _up2_axis(v: np.ndarray, axis: int) -> np.ndarray:
    v = np.moveaxis(v, axis, -1)
    prev = np.concatenate([v[..., :1], v[..., :-1]], axis=-1)
    nxt = np.concatenate([v[..., 1:], v[..., -1:]], axis=-1)
    out = np.empty(v.shape[:-1] + (2 * v.shape[-1],), dtype=v.dtype)
    out[..., 0::2] = 0.75 * v + 0.25 * prev
    out[..., 1::2] = 0.75 * v + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    # ge[i] took 0.25 * v[i-1] (clamped to v[0]); go[i] took 0.25 * v[i+1] (clamped to v[-1])
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling of (B, C, H, W), half-pixel (align-corners=false) convention."""
    out = _up2_axis(_up2_axis(x.data, 2), 3)
    return make_result(np.ascontiguousarray(out), (x,),
                       lambda g: (_up2_axis_adjoint(_up2_axis_adjoint(g, 3), 2),))


# normalisation / softmax --------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return make_result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then per-feature affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]
    red = tuple(range(x.ndim - 1))

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out, (x, gamma, beta), backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation of (B, C, H, W) with per-channel affine."""
    bsz, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    xr = x.data.reshape(bsz, groups, -1)
    mu = xr.mean(axis=-1, keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    gam = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gam + beta.data.reshape(1, c, 1, 1)
    n = xr.shape[-1]

    def backward(g):
        gxhat = (g * gam).reshape(bsz, groups, -1)
        xh = xhat.reshape(bsz, groups, -1)
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xh * (gxhat * xh).sum(axis=-1, keepdims=True) / n)
        return gx.reshape(x.shape), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out, (x, gamma, beta), backward)


# losses -----------------------------------------------------------------

def bce_with_logits(logits: Tensor, target: np.ndarray | Tensor, pos_weight: float = 1.0) -> Tensor:
    """Mean two-sided binary cross-entropy computed from logits."""
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"target shape {y.shape} does not match logits {logits.shape}")
    x = logits.data
    n = x.size
    # -[w y log p + (1 - y) log(1 - p)] with log p = -softplus(-x), log(1-p) = -softplus(x)
    per = pos_weight * y * _softplus(-x) + (1 - y) * _softplus(x)
    out = np.asarray(per.sum() / n, dtype=x.dtype)

    def backward(g):
        p = _sigmoid(x)
        return (g * (pos_weight * y * (p - 1) + (1 - y) * p) / n,)

    return make_result(out, (logits,), backward)
