"""Differentiable primitives.

Each function takes :class:`Tensor` operands, computes the forward value with
numpy, and registers a closure returning one gradient per parent.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .. import _kernels
from .core import ShapeError, Tensor, as_tensor, is_meta, make_result, meta_array

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def neg(a):
    return make_result(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    ad = a.data
    return make_result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a):
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                       lambda g: (g * mask,))


def gelu(a):
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return make_result((x * cdf).astype(a.dtype, copy=False), (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape):
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index):
    shape, dtype = a.shape, a.dtype
    advanced = isinstance(index, (np.ndarray, list)) or (
        isinstance(index, tuple) and any(isinstance(i, (np.ndarray, list)) for i in index))

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    out = a.data[index]
    return make_result(np.array(out, dtype=dtype, copy=advanced) if advanced else out,
                       (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def concat_channels(tensors):
    return concat(tensors, axis=1)


def pad(a, widths):
    """Zero-pad with numpy-style ``widths`` (one ``(before, after)`` pair per axis)."""
    widths = [tuple(w) for w in widths]
    if not any(b or e for b, e in widths):
        return a
    crop = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
    return make_result(np.pad(a.data, widths), (a,), lambda g: (g[crop],))


def pad2d(a, pad_h, pad_w):
    """Zero-pad the last two axes by ``(top, bottom)`` and ``(left, right)``."""
    return pad(a, [(0, 0)] * (a.ndim - 2) + [tuple(pad_h), tuple(pad_w)])


def roll(a, shifts, axes):
    neg_shifts = tuple(-s for s in shifts)
    return make_result(np.roll(a.data, shifts, axes), (a,),
                       lambda g: (np.roll(g, neg_shifts, axes),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if is_meta():
        batch = np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
        return Tensor(meta_array(batch + (ad.shape[-2], bd.shape[-1]),
                                 np.result_type(ad, bd)))

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------------------
# normalizations and attention helpers
# ---------------------------------------------------------------------------

def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (a,), backward)


def softmax_lastdim(a):
    return softmax(a, -1)


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), backward)


def l2_normalize(a, axis=-1, eps=1e-12):
    """``x / max(||x||, eps)`` along ``axis``; a zero vector maps to zero."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x / denom

    def backward(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        active = norm > eps
        return (np.where(active, (g - y * proj) / denom, g / denom),)

    return make_result(y, (a,), backward)


def l2_normalize_lastdim(a, eps=1e-12):
    return l2_normalize(a, -1, eps)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm affine params must have shape ({D},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx = gg = gb = None
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = g.sum(axis=lead)
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(xhat * gd + beta.data, (x, gamma, beta), backward)


class RunningStats:
    """Per-channel running mean/variance buffers of a batch-norm layer."""

    def __init__(self, channels, dtype=np.float32, momentum=0.1):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batch_norm2d(x, gamma, beta, running_stats, training, eps=1e-5):
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm2d expects affine params of shape ({C},), "
                         f"got {gamma.shape} and {beta.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, C, 1, 1)
    if training:
        M = B * H * W
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        if running_stats is not None and not is_meta():
            m = running_stats.momentum
            unbiased = var.reshape(C) * (M / max(M - 1, 1))
            running_stats.mean[:] = (1 - m) * running_stats.mean + m * mu.reshape(C)
            running_stats.var[:] = (1 - m) * running_stats.var + m * unbiased
    else:
        mu = running_stats.mean.reshape(1, C, 1, 1).astype(xd.dtype, copy=False)
        var = running_stats.var.reshape(1, C, 1, 1).astype(xd.dtype, copy=False)
        xc = xd - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = g * gd
            if training:
                gx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            else:
                gx = dxhat * inv
        return gx, gg, gb

    out = xhat * gd + beta.data.reshape(1, C, 1, 1)
    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv_out_size(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """Cross-correlation of ``x`` (B, Cin, H, W) with ``weight`` (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError("conv2d needs stride >= 1, dilation >= 1, padding >= 0")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Ci}")
    Ho = conv_out_size(H, kh, stride, padding, dilation)
    Wo = conv_out_size(W, kw, stride, padding, dilation)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d output would be empty ({Ho}x{Wo}) for input {H}x{W}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    if is_meta():
        return Tensor(meta_array((B, Co, Ho, Wo), x.dtype))

    cols = _kernels.im2col(x.data, kh, kw, stride, padding, dilation)
    w2 = weight.data.reshape(Co, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, Co, 1)

    def backward(g):
        g2 = g.reshape(B, Co, Ho * Wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            gx = _kernels.col2im(gcols, C, H, W, kh, kw, stride, padding, dilation)
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out.reshape(B, Co, Ho, Wo), parents, backward)


def transpose_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Transposed convolution; ``weight`` is (Cin, Cout, kh, kw).

    The forward map is exactly the input-gradient of :func:`conv2d` with the
    same weight, stride and padding.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("transpose_conv2d expects 4-d input and weight")
    if stride < 1 or padding < 0:
        raise ShapeError("transpose_conv2d needs stride >= 1 and padding >= 0")
    B, C, H, W = x.shape
    Ci, Co, kh, kw = weight.shape
    if Ci != C:
        raise ShapeError(f"transpose_conv2d: input has {C} channels, weight expects {Ci}")
    Ho = (H - 1) * stride - 2 * padding + kh
    Wo = (W - 1) * stride - 2 * padding + kw
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"transpose_conv2d output would be empty ({Ho}x{Wo})")
    parents = (x, weight) if bias is None else (x, weight, bias)
    if is_meta():
        return Tensor(meta_array((B, Co, Ho, Wo), x.dtype))

    w2 = weight.data.reshape(Ci, -1)
    x2 = x.data.reshape(B, C, H * W)
    cols = np.matmul(w2.T, x2)
    out = _kernels.col2im(cols, Co, Ho, Wo, kh, kw, stride, padding, 1)
    if bias is not None:
        out += bias.data.reshape(1, Co, 1, 1)

    def backward(g):
        gx = gw = gb = None
        gcols = _kernels.im2col(np.ascontiguousarray(g), kh, kw, stride, padding, 1)
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(B, C, H, W)
        if weight.requires_grad:
            gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, backward)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def bilinear_matrix(size, scale, dtype=np.float64):
    """(size*scale, size) interpolation matrix, align-corners-false with clamping."""
    out = size * scale
    src = (np.arange(out) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    m = np.zeros((out, size), dtype=dtype)
    rows = np.arange(out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample(x, scale):
    if scale < 1 or int(scale) != scale:
        raise ShapeError(f"bilinear_upsample needs an integer scale >= 1, got {scale}")
    scale = int(scale)
    if scale == 1:
        return x
    B, C, H, W = x.shape
    if is_meta():
        return Tensor(meta_array((B, C, H * scale, W * scale), x.dtype))
    ah = bilinear_matrix(H, scale, x.dtype)
    aw = bilinear_matrix(W, scale, x.dtype)
    out = np.matmul(ah, np.matmul(x.data, aw.T))

    def backward(g):
        return (np.matmul(ah.T, np.matmul(g, aw)),)

    return make_result(out, (x,), backward)
