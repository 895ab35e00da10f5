import math

import numpy as np
import pytest

from dcswin.encoder import (PRESETS, ModelConfig, PatchEmbed, PatchMerging, SwinBlock,
                            SwinEncoder, count_parameters, expected_pyramid_shapes, preset,
                            swin_block_pair)
from dcswin.tensor import Tensor, dtype_scope, meta_mode, no_grad, ops, weighted_sum
from dcswin.tensor.core import ShapeError
from dcswin.verify import reference_shifted_attention


def test_patch_embed_token_count(rng):
    tokens, H, W = PatchEmbed(4, 32, rng)(Tensor(np.zeros((1, 3, 64, 64))))
    assert tokens.shape == (1, 256, 32) and (H, W) == (16, 16)


def test_patch_embed_zero_image_rows_equal(rng):
    pe = PatchEmbed(4, 8, rng)
    pe.proj.bias.data[...] = rng.standard_normal(8)
    tokens = pe(Tensor(np.zeros((1, 3, 8, 8))))[0].data[0]
    np.testing.assert_allclose(tokens, np.broadcast_to(tokens[0], tokens.shape))
    ref = pe.proj.bias.data
    ref = (ref - ref.mean()) / np.sqrt(ref.var() + 1e-5)
    np.testing.assert_allclose(tokens[0], ref, atol=1e-5)


def test_patch_embed_equals_strided_conv(rng):
    pe = PatchEmbed(4, 6, rng)
    pe.norm.weight.data[...] = 1
    img = rng.standard_normal((2, 3, 12, 8)).astype(np.float32)
    w = pe.proj.weight.data.T.reshape(6, 3, 4, 4)
    conv = ops.conv2d(Tensor(img), Tensor(w), Tensor(pe.proj.bias.data), stride=4).data
    conv = conv.reshape(2, 6, -1).transpose(0, 2, 1)
    mu, var = conv.mean(-1, keepdims=True), conv.var(-1, keepdims=True)
    ref = (conv - mu) / np.sqrt(var + 1e-5)
    assert np.abs(pe(Tensor(img))[0].data - ref).max() <= 1e-5


def test_patch_embed_rejects_non_rgb(rng):
    with pytest.raises(ShapeError):
        PatchEmbed(4, 8, rng)(Tensor(np.zeros((1, 4, 8, 8))))


def test_patch_merging_shape_and_gather_oracle(rng):
    x = rng.standard_normal((1, 16 * 16, 96))
    out, H, W = PatchMerging(96, rng)(Tensor(x), 16, 16)
    assert out.shape == (1, 64, 192) and (H, W) == (8, 8)

    x = rng.standard_normal((2, 5 * 6, 3))
    got, H2, W2 = PatchMerging.gather(Tensor(x), 5, 6)
    grid = x.reshape(2, 5, 6, 3)
    for b in range(2):
        for i in range(H2):
            for j in range(W2):
                parts = []
                for di, dj in ((0, 0), (1, 0), (0, 1), (1, 1)):
                    r, c = 2 * i + di, 2 * j + dj
                    parts.append(grid[b, r, c] if r < 5 and c < 6 else np.zeros(3))
                np.testing.assert_array_equal(got.data[b, i * W2 + j], np.concatenate(parts))


def test_patch_merging_constant_field(rng):
    pm = PatchMerging(4, rng)
    out = pm(Tensor(np.tile(rng.standard_normal(4), (1, 16, 1))), 4, 4)[0].data
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :1], out.shape), atol=1e-6)


def test_zeroed_block_pair_is_identity(rng):
    pair = [SwinBlock(8, 2, 2, s, 4.0, rng) for s in (0, 1)]
    for b in pair:
        b.zero_residual_branches()
    x = Tensor(rng.standard_normal((1, 16, 8)))
    np.testing.assert_array_equal(swin_block_pair(x, 4, 4, pair).data, x.data)


def _np_layer_norm(x, ln):
    mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * ln.weight.data + ln.bias.data


def _np_block(x, block, w, s):
    gelu = np.vectorize(lambda v: 0.5 * v * (1 + math.erf(v / math.sqrt(2))))
    x = x + reference_shifted_attention(_np_layer_norm(x, block.norm1), block.attn, w, s)
    h = _np_layer_norm(x, block.norm2) @ block.fc1.weight.data + block.fc1.bias.data
    return x + gelu(h) @ block.fc2.weight.data + block.fc2.bias.data


def test_block_pair_matches_straight_line_reference(rng):
    with dtype_scope(np.float64):
        pair = [SwinBlock(4, 2, 2, s, 2.0, rng) for s in (0, 1)]
        for b in pair:
            for _, p in b.named_parameters():
                p.data[...] = rng.standard_normal(p.shape) * 0.5
        x = rng.standard_normal((4, 4, 4))
        out = swin_block_pair(Tensor(x.reshape(1, 16, 4)), 4, 4, pair).data.reshape(4, 4, 4)
    ref = _np_block(_np_block(x, pair[0], 2, 0), pair[1], 2, 1)
    assert np.abs(out - ref).max() <= 1e-5


def test_nano_pyramid_ladder(rng):
    cfg = preset("swin_nano")
    with no_grad():
        pyr = SwinEncoder(cfg, rng)(Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32)))
    assert pyr.shapes() == [(1, 32, 16, 16), (1, 64, 8, 8), (1, 128, 4, 4), (1, 256, 2, 2)]


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_ladder_law_every_preset(name):
    cfg = preset(name)
    shapes = expected_pyramid_shapes(cfg, 2, 256, 192)
    for (_, c0, h0, w0), (_, c1, h1, w1) in zip(shapes, shapes[1:]):
        assert (c1, h1, w1) == (2 * c0, h0 // 2, w0 // 2)


def test_swin_s_dry_run_and_parameter_count():
    cfg = preset("swin_s")
    enc = SwinEncoder(cfg, np.random.default_rng(0))
    with meta_mode():
        pyr = enc(Tensor(np.zeros((1, 3, 1024, 1024), np.float32)))
    assert pyr.shapes() == [(1, 96, 256, 256), (1, 192, 128, 128), (1, 384, 64, 64),
                            (1, 768, 32, 32)]
    n = count_parameters(enc)
    assert abs(n - 50e6) <= 5e6, n


def test_every_encoder_parameter_gets_gradient(rng):
    # at 64^2 the last stage is 2x2; a 1x1 stage would make its bias a softmax constant
    enc = SwinEncoder(preset("swin_nano"), rng)
    pyr = enc(Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32)))
    # the head reads all four taps: ST4 alone leaves the earlier tap convs without gradient
    loss = None
    for t in pyr.as_list():
        term = weighted_sum(t, rng.standard_normal(t.shape))
        loss = term if loss is None else ops.add(loss, term)
    loss.backward()
    dead = [n for n, p in enc.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert not dead


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(depths=[2, 2, 2])
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=30, num_heads=[4, 4, 4, 4])
    with pytest.raises(KeyError):
        preset("swin_xxl")


def test_tiny_stage_uses_one_unshifted_window():
    cfg = preset("swin_nano")
    assert cfg.stage_window(0) == (4, 2)
    assert cfg.stage_window(3) == (2, 0)
