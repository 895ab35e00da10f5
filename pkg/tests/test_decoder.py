import numpy as np
import pytest

from dcswin.decoder import (DCFAM, VARIANTS, DCSwin, DownsampleConnection, LargeFieldUpsample,
                            SegmentationHead, ablation_variant, expected_aggregate_shapes,
                            mirror_pad)
from dcswin.encoder import FeaturePyramid, preset
from dcswin.tensor import Tensor, dtype_scope, meta_mode, no_grad, ops
from dcswin.tensor.core import ShapeError
from dcswin.tensor.gradcheck import numeric_grad, relative_error
from dcswin.train import soft_cross_entropy
from dcswin.verify import E2E_STEP


@pytest.fixture(scope="module")
def nano():
    return preset("swin_nano", num_classes=3)


def _image(rng, B=1, size=64):
    return Tensor(rng.standard_normal((B, 3, size, size)).astype(np.float32))


def test_downsample_connection_shape_and_relu(rng):
    out = DownsampleConnection(96, 192, rng)(Tensor(rng.standard_normal((1, 96, 16, 16))))
    assert out.shape == (1, 192, 8, 8)
    assert (out.data >= 0).all()


def test_downsample_connection_zero_weights(rng):
    d = DownsampleConnection(4, 8, rng)
    for _, p in d.named_parameters():
        if p.ndim == 4:
            p.data[...] = 0
    np.testing.assert_array_equal(d(Tensor(rng.standard_normal((2, 4, 6, 6)))).data, 0)


@pytest.mark.parametrize("cin,cout,size", [(768, 192, 2), (384, 96, 4)])
def test_large_field_upsample_is_x4(rng, cin, cout, size):
    with meta_mode():
        out = LargeFieldUpsample(cin, cout, rng)(Tensor(np.zeros((1, cin, size, size), np.float32)))
    assert out.shape == (1, cout, 4 * size, 4 * size)


def test_nano_aggregate_shapes(rng, nano):
    model = DCSwin(nano, "dcfam", seed=0)
    with no_grad():
        _, afs = model.features(_image(rng))
    assert [t.shape for t in afs] == [(1, 32, 16, 16), (1, 64, 8, 8), (1, 128, 4, 4),
                                      (1, 256, 2, 2)]
    assert [t.shape for t in afs] == expected_aggregate_shapes(nano, 1, 64, 64)


def test_swin_s_af1_dry_run():
    model = DCSwin(preset("swin_s", num_classes=6), "dcfam", seed=0)
    with meta_mode():
        _, afs = model.features(Tensor(np.zeros((1, 3, 1024, 1024), np.float32)))
    assert afs[0].shape == (1, 96, 256, 256)


def test_ladder_violation_names_edge(rng):
    dec = DCFAM(4, rng)
    bad = FeaturePyramid(*(Tensor(np.zeros((1, 4 * 2 ** i, 8 >> i, 8 >> i))) for i in range(3)),
                         Tensor(np.zeros((1, 32, 3, 3))))
    with pytest.raises(ShapeError, match="AF4"):
        dec(bad)


def test_af4_equals_st4_when_branch_zeroed(rng, nano):
    model = DCSwin(nano, "dcfam", seed=0)
    dec = model.decoder
    for bn in (dec.down_af4_out.delta.bn, dec.down_af4_out.mu.bn):
        bn.weight.data[...] = 0
        bn.bias.data[...] = 0
    with no_grad():
        pyr = model.encoder(_image(rng))
        af4 = dec(pyr)[3]
    np.testing.assert_array_equal(af4.data, pyr.st4.data)


def test_shared_attention_storage(rng, nano):
    shared = DCSwin(nano, "dcfam", seed=0).decoder
    shared.ssa_af4.proj_out.weight.data[0, 0, 0, 0] = 123.0
    assert shared.ssa_af3.proj_out.weight.data[0, 0, 0, 0] == 123.0
    shared.sca_af3.gamma.data[...] = 0.25
    assert shared.sca_af2.gamma.data[0] == 0.25

    ns = DCSwin(nano, "dcfam_ns", seed=0).decoder
    assert not np.shares_memory(ns.ssa_af4.proj_out.weight.data, ns.ssa_af3.proj_out.weight.data)
    assert ns.sca_af3.gamma is not ns.sca_af2.gamma


def test_parameter_ordering(nano):
    n = {v: DCSwin(nano, v, seed=0).num_parameters() for v in VARIANTS}
    assert n["baseline"] < n["dc"] < n["dcfam"] <= n["dcfam_ns"]


def test_identity_attention_dc_equals_dcfam(rng, nano):
    dc, full = DCSwin(nano, "dc", seed=0), DCSwin(nano, "dcfam", seed=0)
    full.load_state_dict(dc.state_dict(), strict=False)
    full.decoder.identity_init_attention()
    x = _image(rng, B=2)
    with no_grad():
        a, b = dc.eval()(x).data, full.eval()(x).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_head_output_and_softmax(rng, nano):
    model = DCSwin(nano, "dcfam", seed=0)
    with no_grad():
        logits = model(_image(rng, B=2, size=40))
    assert logits.shape == (2, 3, 40, 40)
    np.testing.assert_allclose(ops.softmax(logits, 1).data.sum(1), 1, atol=1e-5)
    with pytest.raises(ValueError):
        SegmentationHead(8, 1, rng)


def test_gradients_reach_every_parameter(rng, nano):
    model = DCSwin(nano, "dcfam_ns", seed=0)
    model.decoder.ssa_af4.proj_out.weight.data[...] += 0.1
    for sca in (model.decoder.sca_af3, model.decoder.sca_af2):
        sca.gamma.data[...] = 0.5
    x = _image(rng, B=2)
    labels = rng.integers(0, 3, (2, 64, 64))
    soft_cross_entropy(model(x), labels, 0.1).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert not dead


def test_unknown_variant(nano):
    with pytest.raises(ValueError):
        ablation_variant("dcfam_xl", nano)


def test_mirror_pad_matches_numpy():
    x = np.arange(2 * 3 * 3 * 2, dtype=np.float64).reshape(2, 3, 3, 2)
    ref = np.pad(x, [(0, 0), (0, 0), (0, 5), (0, 7)], mode="symmetric")
    np.testing.assert_array_equal(mirror_pad(Tensor(x), 5, 7).data, ref)


@pytest.mark.parametrize("seed", [0, 5, 7])
def test_end_to_end_gradcheck(seed):
    # 16x16 input exercises the padding path up to the 32-pixel model stride
    rng = np.random.default_rng(seed)
    with dtype_scope(np.float64):
        cfg = preset("swin_nano", num_classes=2, img_size=16)
        model = DCSwin(cfg, "dcfam", seed=0).to(np.float64).eval()
        for sca in (model.decoder.sca_af3, model.decoder.sca_af2):
            sca.gamma.data[...] = 0.5
        x = Tensor(rng.standard_normal((1, 3, 16, 16)))
        labels = rng.integers(0, 2, (1, 16, 16))

        def loss():
            return soft_cross_entropy(model(x), labels, 0.1)

        model.zero_grad()
        loss().backward()
        params = [p for _, p in model.named_parameters()]
        worst = 0.0
        for _ in range(50):
            p = params[rng.integers(len(params))]
            i = int(rng.integers(p.size))
            num = numeric_grad(lambda: loss().item(), p.data, E2E_STEP, [i])[i]
            worst = max(worst, float(relative_error(p.grad.reshape(-1)[i], num)))
    assert worst <= 1e-3
