import numpy as np
import pytest

from dcswin import attention
from dcswin.attention import (ChannelAttention, QKVProjection, SpatialAttention, WindowAttention,
                              WindowSpec, brute_force_channel_attention,
                              brute_force_linear_attention, brute_force_spatial_attention,
                              linear_attention, linear_attention_channel,
                              linear_attention_spatial, normalize_rows, shift_mask, window_msa)
from dcswin.tensor import Tensor, dtype_scope, no_grad
from dcswin.tensor.core import ShapeError
from dcswin.verify import reference_shifted_attention


def test_projection_dims(rng):
    proj = QKVProjection(16, rng)
    assert (proj.key_dim, proj.value_dim) == (2, 16)
    assert QKVProjection(4, rng).key_dim == 1


def test_spatial_matches_brute_force(rng):
    proj = QKVProjection(8, rng)
    x = rng.standard_normal((1, 8, 6, 6)).astype(np.float32)
    with no_grad():
        fast = linear_attention_spatial(Tensor(x), proj).data
    ref, _ = brute_force_spatial_attention(x, proj)
    assert fast.dtype == np.float32
    assert np.abs(fast - ref).max() <= 1e-5


def test_channel_matches_brute_force(rng):
    x = rng.standard_normal((1, 6, 4, 4)).astype(np.float32)
    ref, _ = brute_force_channel_attention(x)
    assert np.abs(linear_attention_channel(Tensor(x)).data - ref).max() <= 1e-5


def test_constant_values_preserved(rng):
    q, k = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
    v = np.full((10, 4), 2.5)
    np.testing.assert_allclose(linear_attention(Tensor(q), Tensor(k), Tensor(v)).data, v,
                               atol=1e-6)


def test_single_token_returns_value(rng):
    v = rng.standard_normal((1, 5))
    out = linear_attention(Tensor(rng.standard_normal((1, 2))), Tensor(rng.standard_normal((1, 2))),
                           Tensor(v)).data
    np.testing.assert_allclose(out, v, rtol=1e-6)


def test_channel_core_identical_channels(rng):
    x = np.repeat(rng.standard_normal((1, 1, 3, 3)), 5, axis=1)
    np.testing.assert_allclose(linear_attention_channel(Tensor(x)).data, x, atol=1e-6)


def test_channel_core_single_channel(rng):
    x = rng.standard_normal((2, 1, 3, 4))
    np.testing.assert_allclose(linear_attention_channel(Tensor(x)).data, x, rtol=1e-6)


def test_oracle_weights_are_convex(rng):
    q, k = normalize_rows(rng.standard_normal((20, 4))), normalize_rows(rng.standard_normal((20, 4)))
    _, w = brute_force_linear_attention(q, k, rng.standard_normal((20, 3)))
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(-1), 1, atol=1e-12)


def test_oracle_guard():
    z = np.zeros((attention.BRUTE_FORCE_MAX_N + 1, 2))
    with pytest.raises(ValueError, match="refuses"):
        brute_force_linear_attention(z, z, z)
    out, _ = brute_force_linear_attention(z[:8], z[:8], np.ones((8, 1)))
    assert out.shape == (8, 1)


def test_scale_invariance_of_queries_and_keys(rng):
    q, k, v = (rng.standard_normal((12, 4)).astype(np.float32) for _ in range(3))
    a = linear_attention(Tensor(q), Tensor(k), Tensor(v)).data
    b = linear_attention(Tensor(q * 7.5), Tensor(k * 0.01), Tensor(v)).data
    assert np.abs(a - b).max() <= 1e-5


def test_zero_queries_are_finite():
    z = np.zeros((4, 2))
    out = linear_attention(Tensor(z), Tensor(z), Tensor(np.arange(8.0).reshape(4, 2))).data
    assert np.isfinite(out).all()


def test_spatial_module_identity_and_residual(rng):
    ssa = SpatialAttention(8, rng)
    x = Tensor(rng.standard_normal((1, 8, 3, 3)))
    ssa.identity_init()
    np.testing.assert_array_equal(ssa(x).data, x.data)
    sca = ChannelAttention(gamma=0.0)
    np.testing.assert_array_equal(sca(x).data, x.data)
    sca.gamma.data[...] = 0.5
    np.testing.assert_allclose(sca(x).data, x.data + 0.5 * linear_attention_channel(x).data,
                               rtol=1e-6)


# ---------------------------------------------------------------------------
# windowed attention
# ---------------------------------------------------------------------------

def global_attention(x, attn):
    """Plain multi-head softmax attention over all tokens with relative position bias."""
    H, W, C = x.shape
    w, h = attn.window_size, attn.num_heads
    dh = C // h
    qkv = x.reshape(-1, C) @ attn.qkv.weight.data + attn.qkv.bias.data
    q, k, v = (qkv[:, i * C:(i + 1) * C] for i in range(3))
    table = attn.relative_position_bias_table.data
    coords = [(i, j) for i in range(H) for j in range(W)]
    out = np.zeros((H * W, C))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T * attn.scale
        for a, (ia, ja) in enumerate(coords):
            for b, (ib, jb) in enumerate(coords):
                logits[a, b] += table[(ia - ib + w - 1) * (2 * w - 1) + (ja - jb + w - 1), head]
        p = np.exp(logits - logits.max(1, keepdims=True))
        out[:, sl] = (p / p.sum(1, keepdims=True)) @ v[:, sl]
    return (out @ attn.proj.weight.data + attn.proj.bias.data).reshape(H, W, C)


def _attn(rng, C=8, w=4, heads=2):
    attn = WindowAttention(C, w, heads, rng)
    for p in (attn.qkv.weight, attn.proj.weight, attn.relative_position_bias_table):
        p.data[...] = rng.standard_normal(p.shape) * 0.5
    return attn


def test_full_window_equals_global_attention(rng):
    with dtype_scope(np.float64):
        attn = _attn(rng)
        x = rng.standard_normal((4, 4, 8))
        out = window_msa(Tensor(x.reshape(1, 16, 8)), 4, 4, WindowSpec(4, 0, 2), attn).data
    assert np.abs(out.reshape(4, 4, 8) - global_attention(x, attn)).max() <= 1e-5


@pytest.mark.parametrize("H,W,w,s", [(8, 8, 4, 2), (12, 8, 4, 2), (6, 6, 2, 1)])
def test_shifted_windows_match_reference(rng, H, W, w, s):
    with dtype_scope(np.float64):
        attn = _attn(rng, w=w)
        x = rng.standard_normal((H, W, 8))
        out = window_msa(Tensor(x.reshape(1, H * W, 8)), H, W, WindowSpec(w, s, 2), attn).data
    assert np.abs(out.reshape(H, W, 8) - reference_shifted_attention(x, attn, w, s)).max() <= 1e-9


def test_mask_blocks_cross_region_weights(rng):
    mask = shift_mask(8, 8, 4, 2)
    assert mask.shape == (4, 16, 16)
    assert set(np.unique(mask)) == {0.0, -100.0}
    logits = rng.standard_normal(mask.shape) * 3 + mask
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    assert p[mask < 0].max() <= 1e-8
    # the top-left window never wraps, so nothing in it is masked
    assert not mask[0].any()


def test_window_permutation_no_leakage(rng):
    attn = _attn(rng)
    x = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)  # two windows side by side
    swapped = np.concatenate([x[:, :, 4:], x[:, :, :4]], axis=2)
    spec = WindowSpec(4, 0, 2)
    run = lambda a: window_msa(Tensor(a.reshape(1, 32, 8)), 4, 8, spec, attn).data.reshape(4, 8, 8)
    a, b = run(x[0]), run(swapped[0])
    np.testing.assert_allclose(a[:, 4:], b[:, :4], atol=1e-6)
    np.testing.assert_allclose(a[:, :4], b[:, 4:], atol=1e-6)


def test_padding_is_stripped(rng):
    attn = _attn(rng)
    out = window_msa(Tensor(rng.standard_normal((2, 30, 8))), 5, 6, WindowSpec(4, 2, 2), attn)
    assert out.shape == (2, 30, 8)


def test_window_errors(rng):
    with pytest.raises(ShapeError):
        WindowAttention(6, 4, 4, rng)
    with pytest.raises(ValueError):
        WindowSpec(4, 1, 2)
    with pytest.raises(ShapeError):
        window_msa(Tensor(np.zeros((1, 10, 8))), 3, 3, WindowSpec(4, 0, 2), _attn(rng))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_row_with_no_weight_is_uniform(dtype):
    # Dk = 1: a query opposite to every key gives weights 1 + q.k = 0 across the row
    q = np.array([[1.0], [-1.0], [1.0]], dtype)
    k = np.array([[-1.0], [-1.0], [-1.0]], dtype)
    v = np.arange(6, dtype=dtype).reshape(3, 2) + 1
    with np.errstate(all="raise"):
        out = linear_attention(Tensor(q), Tensor(k), Tensor(v)).data
    ref, w = brute_force_linear_attention(q, k, v)
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out[[0, 2]], np.tile(v.mean(0), (2, 1)), rtol=1e-6)
    np.testing.assert_allclose(out, ref, atol=1e-5)
    np.testing.assert_allclose(w.sum(-1), 1, atol=1e-6)
    np.testing.assert_allclose(w[1], 1 / 3)
