"""Attention kernels.

Two families live here:

* softmax-free linear attention with similarity ``1 + q_hat . k_hat`` over
  L2-normalized queries and keys, used along the spatial axis (SSA) and the
  channel axis (SCA), together with a quadratic brute-force reference;
* windowed multi-head softmax attention with relative position bias and the
  cyclic-shift mask used by the encoder blocks.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ops
from .tensor.core import ShapeError, is_meta
from .tensor.nn import Conv2d, Linear, Module, Parameter, trunc_normal, zeros

DEN_EPS = 1e-12
BRUTE_FORCE_MAX_N = 4096
MASK_VALUE = -100.0


# ---------------------------------------------------------------------------
# linear attention
# ---------------------------------------------------------------------------

def linear_attention(q, k, v, eps=DEN_EPS):
    """Factorized linear attention over the token axis (second to last).

    ``q``, ``k`` are (..., N, Dk) and ``v`` is (..., N, Dv). Output row i is
    ``(sum_j v_j + q_i (K^T V)) / (N + q_i sum_j k_j)`` with q, k row-normalized.
    ``K^T V`` and ``sum_j k_j`` are reduced once, so no N x N array is built.
    """
    return _factorized(ops.l2_normalize(q, -1), ops.l2_normalize(k, -1), v, eps)


def _factorized(qn, kn, v, eps, gram_first=False):
    """Factorized weights applied to centred values, ``mean(v) + sum_j w_ij (v_j - mean(v))``.

    Equal to the plain form since each weight row sums to one, but the
    rounding error now scales with the spread of v rather than its size, so
    constant values come back exactly. ``gram_first`` forms ``Q K^T`` before
    applying it to v, the cheaper order when tokens are few and wide (channels).

    Every weight ``1 + q.k`` is >= 0, so a zero total means every weight is
    zero (all keys opposite to the query, e.g. when Dk = 1). ``N + q.sum(k)``
    then cancels to rounding noise. Such rows take the limit of adding a
    vanishing constant to every weight, which is ``mean(v)``.
    """
    n = kn.shape[-2]
    vmean = ops.mean(v, axis=-2, keepdims=True)
    vc = ops.sub(v, vmean)
    if gram_first:
        mixed = ops.matmul(ops.matmul(qn, kn.transpose(-2, -1)), vc)
    else:
        mixed = ops.matmul(qn, ops.matmul(kn.transpose(-2, -1), vc))
    ksum = ops.sum(kn, axis=-2, keepdims=True)
    num = ops.add(ops.sum(vc, axis=-2, keepdims=True), mixed)
    den = ops.add(ops.matmul(qn, ksum.transpose(-2, -1)), float(n))
    if not is_meta():
        dead = den.data <= 16 * np.finfo(den.dtype).eps * n
        if dead.any():
            keep = Tensor((~dead).astype(den.dtype))
            den = ops.add(ops.mul(den, keep), Tensor(dead.astype(den.dtype)))
            num = ops.mul(num, keep)
    return ops.add(vmean, ops.div(num, ops.add(den, eps)))


def brute_force_linear_attention(q_hat, k_hat, v, force=False):
    """Reference path that materializes the N x N weight matrix.

    Takes already-normalized ``q_hat``/``k_hat`` as numpy arrays with a trailing
    (N, D) layout. Returns ``(out, weights)``; each weight row is
    ``(1 + q_i . k_j) / sum_j (1 + q_i . k_j)``, or uniform when that sum is 0.
    """
    q_hat, k_hat, v = (np.asarray(a) for a in (q_hat, k_hat, v))
    n = k_hat.shape[-2]
    if n > BRUTE_FORCE_MAX_N and not force:
        raise ValueError(f"brute-force attention refuses N={n} > {BRUTE_FORCE_MAX_N}")
    w = 1.0 + q_hat @ np.swapaxes(k_hat, -1, -2)
    total = w.sum(axis=-1, keepdims=True)
    # a row with no weight at all falls back to uniform weights
    w = np.where(total > 16 * np.finfo(w.dtype).eps * n, w / (total + DEN_EPS), 1.0 / n)
    return w @ v, w


def normalize_rows(a, eps=1e-12):
    a = np.asarray(a)
    return a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), eps)


class QKVProjection(Module):
    """1x1 convolutions producing query/key (C/8 channels) and value (C channels)."""

    def __init__(self, channels, rng, key_ratio=8):
        self.key_dim = max(1, channels // key_ratio)
        self.value_dim = channels
        self.query = Conv2d(channels, self.key_dim, 1, rng)
        self.key = Conv2d(channels, self.key_dim, 1, rng)
        self.value = Conv2d(channels, self.value_dim, 1, rng)

    def forward(self, x):
        B, _, H, W = x.shape
        n = H * W

        def tokens(t):
            return t.reshape(B, t.shape[1], n).transpose(-2, -1)

        return tokens(self.query(x)), tokens(self.key(x)), tokens(self.value(x))


def linear_attention_spatial(x, proj):
    """Spatial linear attention core: (B, C, H, W) -> (B, Dv, H, W)."""
    B, _, H, W = x.shape
    if H * W < 1:
        raise ShapeError("spatial attention needs at least one position")
    q, k, v = proj(x)
    out = linear_attention(q, k, v)
    return out.transpose(-2, -1).reshape(B, proj.value_dim, H, W)


def linear_attention_channel(x, eps=DEN_EPS):
    """Channel linear attention core on the flattened map R(x) of shape (B, C, N).

    Channels act as tokens: queries, keys and values are all R(x), with the
    queries/keys L2-normalized over the spatial axis. The C x C similarity is
    formed first, which keeps the cost linear in the number of pixels.
    """
    B, C, H, W = x.shape
    r = x.reshape(B, C, H * W)
    rn = ops.l2_normalize(r, -1)
    return _factorized(rn, rn, r, eps, gram_first=True).reshape(B, C, H, W)


def brute_force_channel_attention(x):
    """Quadratic-in-channels reference for :func:`linear_attention_channel`."""
    x = np.asarray(x, dtype=np.float64)
    B, C, H, W = x.shape
    r = x.reshape(B, C, H * W)
    rn = normalize_rows(r)
    out, w = brute_force_linear_attention(rn, rn, r)
    return out.reshape(B, C, H, W), w


def brute_force_spatial_attention(x, proj, force=False):
    """Quadratic-in-pixels reference for :func:`linear_attention_spatial` (float64)."""
    B, _, H, W = x.shape
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    def project(conv):
        w = conv.weight.data.astype(np.float64)[:, :, 0, 0]
        b = conv.bias.data.astype(np.float64)
        return np.einsum("oc,bcn->bno", w, xd.reshape(B, -1, H * W)) + b

    q, k, v = project(proj.query), project(proj.key), project(proj.value)
    out, w = brute_force_linear_attention(normalize_rows(q), normalize_rows(k), v, force)
    return np.swapaxes(out, -1, -2).reshape(B, proj.value_dim, H, W), w


class SpatialAttention(Module):
    """Spatial linear attention with 1x1 output projection and a residual path."""

    def __init__(self, channels, rng):
        self.proj_in = QKVProjection(channels, rng)
        self.proj_out = Conv2d(channels, channels, 1, rng)

    def forward(self, x):
        return ops.add(x, self.proj_out(linear_attention_spatial(x, self.proj_in)))

    def identity_init(self):
        self.proj_out.weight.data[...] = 0
        self.proj_out.bias.data[...] = 0


class ChannelAttention(Module):
    """Channel linear attention, ``x + gamma * core(x)`` with learnable scalar gain."""

    def __init__(self, gamma=0.0):
        self.gamma = Parameter(zeros(1) + gamma)

    def forward(self, x):
        return ops.add(x, ops.mul(self.gamma, linear_attention_channel(x)))

    def identity_init(self):
        self.gamma.data[...] = 0


# ---------------------------------------------------------------------------
# windowed softmax attention
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowSpec:
    window_size: int
    shift: int
    num_heads: int

    def __post_init__(self):
        if self.shift not in (0, self.window_size // 2):
            raise ValueError(f"shift must be 0 or {self.window_size // 2}, got {self.shift}")


@functools.lru_cache(maxsize=None)
def relative_position_index(w):
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = (coords[:, :, None] - coords[:, None, :]).transpose(1, 2, 0) + (w - 1)
    return rel[..., 0] * (2 * w - 1) + rel[..., 1]


@functools.lru_cache(maxsize=64)
def shift_mask(hp, wp, w, s):
    """(nW, w*w, w*w) additive mask: 0 within a region, -100 across regions."""
    img = np.zeros((hp, wp))
    label = 0
    for hs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
        for ws in (slice(0, -w), slice(-w, -s), slice(-s, None)):
            img[hs, ws] = label
            label += 1
    win = img.reshape(hp // w, w, wp // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    diff = win[:, None, :] - win[:, :, None]
    mask = np.where(diff != 0, MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def window_partition(x, w):
    """(B, Hp, Wp, C) -> (B * nW, w*w, C), windows in row-major grid order."""
    B, H, W, C = x.shape
    x = x.reshape(B, H // w, w, W // w, w, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B * (H // w) * (W // w), w * w, C)


def window_reverse(windows, w, B, H, W):
    C = windows.shape[-1]
    x = windows.reshape(B, H // w, W // w, w, w, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


class WindowAttention(Module):
    """Multi-head softmax attention inside each window plus relative position bias."""

    def __init__(self, dim, window_size, num_heads, rng):
        if dim % num_heads:
            raise ShapeError(f"{num_heads} heads do not divide {dim} channels")
        self.dim, self.window_size, self.num_heads = dim, window_size, num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.relative_position_bias_table = Parameter(
            trunc_normal(rng, ((2 * window_size - 1) ** 2, num_heads)))

    def position_bias(self):
        L = self.window_size ** 2
        idx = relative_position_index(self.window_size).reshape(-1)
        bias = self.relative_position_bias_table[idx]
        return bias.reshape(L, L, self.num_heads).permute(2, 0, 1)

    def forward(self, windows, mask=None):
        nB, L, C = windows.shape
        h = self.num_heads
        qkv = self.qkv(windows).reshape(nB, L, 3, h, C // h).permute(2, 0, 3, 1, 4)
        q, k, v = ops.mul(qkv[0], self.scale), qkv[1], qkv[2]
        attn = ops.add(ops.matmul(q, k.transpose(-2, -1)), self.position_bias())
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.reshape(nB // nW, nW, h, L, L)
            attn = ops.add(attn, Tensor(mask[None, :, None].astype(attn.dtype)))
            attn = attn.reshape(nB, h, L, L)
        attn = ops.softmax(attn, -1)
        out = ops.matmul(attn, v).permute(0, 2, 1, 3).reshape(nB, L, C)
        return self.proj(out)


def window_msa(x, H, W, spec, attn):
    """Windowed (optionally shifted) attention over tokens ``x`` of shape (B, H*W, C)."""
    B, L, C = x.shape
    if L != H * W:
        raise ShapeError(f"token count {L} != {H}x{W}")
    if C % spec.num_heads:
        raise ShapeError(f"{spec.num_heads} heads do not divide {C} channels")
    w, s = spec.window_size, spec.shift
    x = x.reshape(B, H, W, C)
    pad_h, pad_w = (-H) % w, (-W) % w
    x = ops.pad(x, [(0, 0), (0, pad_h), (0, pad_w), (0, 0)])
    Hp, Wp = H + pad_h, W + pad_w
    if s:
        x = ops.roll(x, (-s, -s), (1, 2))
    out = attn(window_partition(x, w), shift_mask(Hp, Wp, w, s) if s else None)
    x = window_reverse(out, w, B, Hp, Wp)
    if s:
        x = ops.roll(x, (s, s), (1, 2))
    if pad_h or pad_w:
        x = x[:, :H, :W, :]
    return x.reshape(B, H * W, C)
