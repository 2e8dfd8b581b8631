"""Differentiable primitives.

Layout is channels-last throughout: sequences are ``(..., T, C)`` and videos
``(..., T, H, W, C)``. Leading axes are free batch axes.
"""
from __future__ import annotations

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, kink_log


def _arr(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sum_last(x, keepdims=True):
    # gemv beats ufunc.reduce over a short contiguous last axis
    ones = np.ones((x.shape[-1], 1), dtype=x.dtype)
    out = x @ ones
    return out if keepdims else out[..., 0]


def _sum_rows(x):
    """Sum over every axis but the last."""
    flat = x.reshape(-1, x.shape[-1])
    return np.ones((1, flat.shape[0]), dtype=x.dtype) @ flat


def _norm_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# -- elementwise arithmetic --------------------------------------------------

def add(a, b):
    if not isinstance(a, Tensor):
        a = _arr(a, b)
    b = _arr(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _arr(a, b)
    b = _arr(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    if not isinstance(a, Tensor):
        a = _arr(a, b)
    b = _arr(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), bw, "mul")


def reciprocal(x):
    y = 1.0 / x.data

    def bw(g):
        return (-g * y * y,)

    return Tensor._from_op(y, (x,), bw, "reciprocal")


def power(x, p):
    """Elementwise ``x ** p`` for a constant real exponent."""
    p = float(p)
    y = x.data ** p

    def bw(g):
        return (g * p * x.data ** (p - 1.0),)

    return Tensor._from_op(y, (x,), bw, "power")


def exp(x):
    y = np.exp(x.data)

    def bw(g):
        return (g * y,)

    return Tensor._from_op(y, (x,), bw, "exp")


def log(x):
    xd = x.data

    def bw(g):
        return (g / xd,)

    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return Tensor._from_op(y, (x,), bw, "log")


def relu(x):
    mask = x.data > 0
    log = kink_log()
    if log is not None:
        log.append(np.packbits(mask).tobytes())

    def bw(g):
        return (g * mask,)

    return Tensor._from_op(np.maximum(x.data, 0), (x,), bw, "relu")


def sigmoid(x):
    xd = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    # saturated values would round to exactly 0 or 1; keep them strictly inside
    fi = np.finfo(y.dtype)
    y = np.clip(y, fi.tiny, 1.0 - fi.epsneg).astype(x.dtype, copy=False)

    def bw(g):
        return (g * y * (1.0 - y),)

    return Tensor._from_op(y, (x,), bw, "sigmoid")


def pointwise(x, fn):
    """Apply ``fn`` in {"relu", "sigmoid"} elementwise."""
    fns = {"relu": relu, "sigmoid": sigmoid}
    if fn not in fns:
        raise ValueError(f"unknown pointwise function {fn!r}")
    return fns[fn](x)


# -- shape manipulation ------------------------------------------------------

def reshape(x, shape):
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return Tensor._from_op(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return Tensor._from_op(np.transpose(x.data, axes), (x,), bw, "transpose")


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, idx):
    src_shape = x.shape
    dtype = x.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(np.array(x.data[idx]), (x,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = list(tensors)
    axis = _norm_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tuple(tensors), bw, "concat")


def broadcast_to(x, shape):
    src = x.shape

    def bw(g):
        return (_unbroadcast(g, src),)

    return Tensor._from_op(np.broadcast_to(x.data, shape).copy(), (x,), bw, "broadcast")


# -- reductions --------------------------------------------------------------

def sum(x, axis=None, keepdims=False):
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    src = x.shape
    if axis is None:
        count = x.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[a] for a in ax]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return Tensor._from_op(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """Batched matrix product over the last two axes with broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation and probabilities ----------------------------------------

def softmax(x, axis=-1):
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(y, (x,), bw, "log_softmax")


def layer_norm(x, gain=None, bias=None, eps=1e-5, axis=-1):
    """Normalise to zero mean, unit (population) variance over ``axis``.

    ``axis`` may be a tuple, e.g. ``(-3, -2, -1)`` normalises each frame's
    whole ``H x W x C`` map. With a single axis, ``gain``/``bias`` run along
    that axis; with several they are per-channel (last axis).
    """
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(sorted(_norm_axis(a, x.ndim) for a in axes))
    last = axes == (x.ndim - 1,)
    n = int(np.prod([x.shape[a] for a in axes]))
    p_axis = axes[0] if len(axes) == 1 else x.ndim - 1

    def mean_ax(a):
        if last:
            return _sum_last(a) * (1.0 / n)
        return a.mean(axis=axes, keepdims=True)

    mu = mean_ax(x.data)
    xc = x.data - mu
    var = mean_ax(xc * xc)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = [1] * x.ndim
    bshape[p_axis] = x.shape[p_axis]
    gd = gain.data.reshape(bshape) if gain is not None else None
    y = xhat * gd if gd is not None else xhat
    if bias is not None:
        y = y + bias.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != p_axis)

    def reduce_other(a, like):
        if p_axis == x.ndim - 1:
            return _sum_rows(a).reshape(like.shape)
        return a.sum(axis=reduce_axes).reshape(like.shape)

    def bw(g):
        dxhat = g * gd if gd is not None else g
        dx = inv * (dxhat - mean_ax(dxhat) - xhat * mean_ax(dxhat * xhat))
        out = [dx]
        if gain is not None:
            out.append(reduce_other(g * xhat, gain) if gain.requires_grad else None)
        if bias is not None:
            out.append(reduce_other(g, bias) if bias.requires_grad else None)
        return tuple(out)

    parents = tuple(p for p in (x, gain, bias) if p is not None)
    return Tensor._from_op(y, parents, bw, "layer_norm")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of the true class under softmax(logits)."""
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects N x K logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} rows of logits")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


# -- convolutions ------------------------------------------------------------

def conv_temporal(x, w, bias=None, stride=1, axis=-2, padding=None):
    """1-D convolution along ``axis`` with channels on the last axis.

    ``w`` has shape ``(t, C_in, C_out)``. Stride 1 uses symmetric zero padding
    ``t // 2`` so the time extent is preserved; ``padding`` overrides it.
    """
    t, cin, cout = w.shape
    if t % 2 == 0:
        raise ValueError(f"temporal kernel length must be odd, got {t}")
    axis = _norm_axis(axis, x.ndim)
    if axis == x.ndim - 1:
        raise ValueError("time axis cannot be the channel axis")
    if x.shape[-1] != cin:
        raise ValueError(f"conv_temporal: input has {x.shape[-1]} channels, kernel expects {cin}")
    pad = t // 2 if padding is None else padding
    T = x.shape[axis]
    Tp = T + 2 * pad
    if Tp < t:
        raise ValueError("kernel longer than padded input")
    Tout = (Tp - t) // stride + 1
    widths = [(0, 0)] * x.ndim
    widths[axis] = (pad, pad)
    xp = np.pad(x.data, widths)
    wd = w.data

    def tap(arr, j):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(j, j + stride * (Tout - 1) + 1, stride)
        return tuple(sl)

    out = None
    for j in range(t):
        term = xp[tap(xp, j)] @ wd[j]
        out = term if out is None else out + term
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(t):
                gxp[tap(gxp, j)] += g @ wd[j].T
            sl = [slice(None)] * x.ndim
            sl[axis] = slice(pad, pad + T)
            gx = gxp[tuple(sl)]
        if w.requires_grad:
            g2 = g.reshape(-1, cout)
            gw = np.stack([xp[tap(xp, j)].reshape(-1, cin).T @ g2 for j in range(t)])
        if bias is not None and bias.requires_grad:
            gb = _sum_rows(g).reshape(cout)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._from_op(out, parents, bw, "conv_temporal")


def _pad_hw(a, pad):
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    return np.pad(a, widths)


def _im2col(xp, k, stride, Ho, Wo):
    """``(..., Hp, Wp, C) -> (..., Ho, Wo, k*k*C)`` patches ordered (dy, dx, c)."""
    lead = xp.shape[:-3]
    c = xp.shape[-1]
    if k == 1:
        return np.ascontiguousarray(xp[..., ::stride, ::stride, :][..., :Ho, :Wo, :])
    win = sliding_window_view(xp, (k, k), axis=(-3, -2))  # (..., Hp-k+1, Wp-k+1, C, k, k)
    win = win[..., ::stride, ::stride, :, :, :][..., :Ho, :Wo, :, :, :]
    nd = win.ndim
    perm = tuple(range(nd - 5)) + (nd - 5, nd - 4, nd - 2, nd - 1, nd - 3)
    return np.ascontiguousarray(np.transpose(win, perm)).reshape(lead + (Ho, Wo, k * k * c))


def conv_spatial(x, w, bias=None, stride=1):
    """Per-frame 2-D convolution over the ``(H, W)`` axes at positions -3, -2.

    ``w`` has shape ``(k, k, C_in, C_out)``; zero padding ``k // 2``.
    """
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"spatial kernel must be square with odd size, got {k}x{k2}")
    if x.ndim < 3 or x.shape[-1] != cin:
        raise ValueError(f"conv_spatial: input {x.shape} incompatible with kernel {w.shape}")
    pad = k // 2
    H, W = x.shape[-3], x.shape[-2]
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ValueError("kernel larger than padded input")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    lead = x.shape[:-3]
    xp = _pad_hw(x.data, pad)
    cols = _im2col(xp, k, stride, Ho, Wo)
    wm = w.data.reshape(k * k * cin, cout)
    out = cols @ wm
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad and stride == 1:
            # adjoint of a stride-1 "same" conv is the same conv with the kernel
            # flipped spatially and its channel axes swapped
            wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            gx = _im2col(_pad_hw(g, pad), k, 1, H, W) @ wflip
        elif x.requires_grad:
            gcols = (g @ wm.T).reshape(lead + (Ho, Wo, k, k, cin))
            gxp = np.zeros_like(xp)
            for a in range(k):
                for b in range(k):
                    gxp[..., a:a + stride * (Ho - 1) + 1:stride,
                        b:b + stride * (Wo - 1) + 1:stride, :] += gcols[..., a, b, :]
            gx = gxp[..., pad:pad + H, pad:pad + W, :]
        if w.requires_grad:
            gw = (cols.reshape(-1, k * k * cin).T @ g.reshape(-1, cout)).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = _sum_rows(g).reshape(cout)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._from_op(out, parents, bw, "conv_spatial")


# -- pooling and resampling --------------------------------------------------

def pool(x, kind, window=None, keep_axes=0):
    """Average pooling.

    ``spatial_avg`` averages ``(H, W)`` windows of a ``(..., H, W, C)`` tensor;
    the default (and full) window collapses space entirely to ``(..., C)``.
    ``global_avg`` averages every axis except the first ``keep_axes`` and the
    channel axis.
    """
    if kind == "spatial_avg":
        H, W = x.shape[-3], x.shape[-2]
        wh, ww = window if window is not None else (H, W)
        if H % wh or W % ww:
            raise ValueError(f"pool window {(wh, ww)} does not divide extents {(H, W)}")
        if (wh, ww) == (H, W):
            return mean(x, axis=(x.ndim - 3, x.ndim - 2))
        lead = x.shape[:-3]
        r = reshape(x, lead + (H // wh, wh, W // ww, ww, x.shape[-1]))
        nd = r.ndim
        return mean(r, axis=(nd - 4, nd - 2))
    if kind == "global_avg":
        axes = tuple(range(keep_axes, x.ndim - 1))
        if not axes:
            return x
        return mean(x, axis=axes)
    raise ValueError(f"unknown pool kind {kind!r}")


def interpolation_matrix(t_in, t_out, dtype=np.float64):
    """Linear resampling weights (t_out x t_in), half-pixel centres, edges clamped."""
    m = np.zeros((t_out, t_in), dtype=dtype)
    scale = t_in / t_out
    for i in range(t_out):
        src = min(builtins.max((i + 0.5) * scale - 0.5, 0.0), t_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, t_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resample_time(x, t_out, axis=-2):
    """Linearly resample ``x`` to ``t_out`` steps along ``axis`` (differentiable)."""
    axis = _norm_axis(axis, x.ndim)
    t_in = x.shape[axis]
    if t_in == t_out:
        return x
    if axis != x.ndim - 2:
        raise ValueError("resample_time supports the (..., T, C) layout only")
    m = Tensor(interpolation_matrix(t_in, t_out), dtype=x.dtype)
    return matmul(m, x)
