"""Self-check suite run by ``dcswin verify``.

Each group compares an implementation against an independent reference
(brute force, finite differences, integer counting). ``inject_fault``
replaces one implementation with a subtly wrong one so that the suite's
sensitivity can be checked.
"""

from __future__ import annotations

import contextlib
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels, attention, metrics
from .attention import (ChannelAttention, SpatialAttention, WindowAttention, WindowSpec,
                        brute_force_channel_attention, brute_force_spatial_attention,
                        window_msa)
from .data import TileSpec, nearest_color_classifier, stitch, synth_scene, tile_array
from .decoder import DCSwin, DownsampleConnection, LargeFieldUpsample
from .encoder import SwinBlock, expected_pyramid_shapes, preset
from .tensor import Tensor, check_gradients, dtype_scope, meta_mode, no_grad, ops, weighted_sum
from .tensor.gradcheck import numeric_grad, relative_error
from .train import soft_cross_entropy

E2E_STEP = 1e-5


@dataclass
class Check:
    group: str
    name: str
    passed: bool
    detail: str = ""


class _Group:
    def __init__(self, name):
        self.name, self.checks = name, []

    def add(self, name, passed, detail=""):
        self.checks.append(Check(self.name, name, bool(passed), detail))


# ---------------------------------------------------------------------------
# groups
# ---------------------------------------------------------------------------

def _worse(worst, value):
    """Running maximum in which NaN counts as an infinite error."""
    value = float(value)
    return max(worst, value if np.isfinite(value) else np.inf)


def check_kernels(g, rng):
    cases = [(2, 3, 7, 9, 3, 1, 1, 1), (1, 4, 8, 8, 3, 2, 1, 1), (1, 2, 11, 10, 3, 1, 6, 6),
             (2, 2, 6, 6, 2, 2, 0, 1)]
    impls = _kernels.backends()
    for case in cases:
        B, C, H, W, k, s, p, d = case
        x = rng.standard_normal((B, C, H, W))
        ref = impls["numpy"][0](x, k, k, s, p, d)
        y = rng.standard_normal(ref.shape)
        # <im2col(x), y> == <x, col2im(y)>
        lhs, rhs = np.vdot(ref, y), np.vdot(x, impls["numpy"][1](y, C, H, W, k, k, s, p, d))
        g.add(f"adjoint {case}", abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs)))
        for name, (im2col, col2im) in impls.items():
            same = np.array_equal(im2col(x, k, k, s, p, d), ref)
            back = np.allclose(col2im(y, C, H, W, k, k, s, p, d),
                               impls["numpy"][1](y, C, H, W, k, k, s, p, d), atol=1e-12)
            g.add(f"{name} agrees {case}", same and back)


def check_gradcheck(g, rng):
    def probe(make, *shapes, tol=1e-3, params=()):
        xs = [Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]
        out = make(*xs)
        w = rng.standard_normal(out.shape)
        tensors = xs + list(params)
        err = check_gradients(lambda: weighted_sum(make(*xs), w), tensors, max_entries=24,
                              rng=rng)
        return err <= tol, f"max rel err {err:.2e}"

    with dtype_scope(np.float64):
        conv_w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        primitives = {
            "matmul": (lambda a, b: ops.matmul(a, b), (2, 3, 4), (2, 4, 5)),
            "softmax": (lambda a: ops.softmax(a, -1), (2, 3, 5)),
            "log_softmax": (lambda a: ops.log_softmax(a, 1), (2, 4, 3)),
            "l2_normalize": (lambda a: ops.l2_normalize(a, -1), (3, 4)),
            "gelu": (lambda a: ops.gelu(a), (2, 5)),
            "layer_norm": (lambda a, g, b: ops.layer_norm(a, g, b), (2, 3, 6), (6,), (6,)),
            "conv2d": (lambda a: ops.conv2d(a, conv_w, None, 1, 1, 1), (2, 2, 5, 5)),
            "conv2d dilated": (lambda a: ops.conv2d(a, conv_w, None, 2, 2, 2), (1, 2, 7, 7)),
            "transpose_conv2d": (lambda a: ops.transpose_conv2d(a, conv_w, None, 2, 0),
                                 (1, 3, 3, 3)),
            "bilinear_upsample": (lambda a: ops.bilinear_upsample(a, 2), (1, 2, 3, 4)),
            "roll": (lambda a: ops.roll(a, (1, -2), (1, 2)), (1, 4, 5)),
        }
        for name, (fn, *shapes) in primitives.items():
            ok, detail = probe(fn, *shapes, params=[conv_w] if "conv" in name else ())
            g.add(f"primitive {name}", ok, detail)

        def module_probe(name, module, shape):
            x = Tensor(rng.standard_normal(shape), requires_grad=True)
            params = [p for _, p in module.named_parameters()]
            w = rng.standard_normal(module(x).shape)
            err = check_gradients(lambda: weighted_sum(module(x), w), [x] + params,
                                  max_entries=12, rng=rng)
            g.add(f"layer {name}", err <= 1e-3, f"max rel err {err:.2e}")

        module_probe("downsample connection", DownsampleConnection(2, 4, rng), (2, 2, 8, 8))
        module_probe("large-field upsample", LargeFieldUpsample(4, 2, rng), (1, 4, 2, 2))
        ssa = SpatialAttention(8, rng)
        ssa.proj_out.weight.data[...] = rng.standard_normal(ssa.proj_out.weight.shape) * 0.3
        module_probe("spatial attention", ssa, (2, 8, 4, 4))
        module_probe("channel attention", ChannelAttention(0.7), (2, 6, 4, 4))

        blocks = [SwinBlock(8, 2, 4, s, 2.0, rng) for s in (0, 2)]
        x = Tensor(rng.standard_normal((1, 64, 8)), requires_grad=True)
        params = [p for b in blocks for _, p in b.named_parameters()]
        w = rng.standard_normal((1, 64, 8))
        err = check_gradients(lambda: weighted_sum(blocks[1](blocks[0](x, 8, 8), 8, 8), w),
                              [x] + params, max_entries=8, rng=rng)
        g.add("layer swin block pair", err <= 1e-3, f"max rel err {err:.2e}")

        logits = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        labels = rng.integers(0, 3, (2, 4, 4))
        err = check_gradients(lambda: soft_cross_entropy(logits, labels, 0.1), [logits])
        g.add("soft cross-entropy", err <= 1e-4, f"max rel err {err:.2e}")

        # whole model at 16x16, which also runs the padding path to the 32-pixel stride.
        # A 1e-3 step crosses ReLU kinks somewhere in a network this deep; the
        # finite difference itself is then off by a few percent.
        model = DCSwin(preset("swin_nano", num_classes=2, img_size=16), "dcfam", seed=0)
        model = model.to(np.float64).eval()
        for sca in (model.decoder.sca_af3, model.decoder.sca_af2):
            sca.gamma.data[...] = 0.5
        x = Tensor(rng.standard_normal((1, 3, 16, 16)))
        labels = rng.integers(0, 2, (1, 16, 16))

        def loss():
            return soft_cross_entropy(model(x), labels, 0.1)

        model.zero_grad()
        loss().backward()
        params = model.parameters()
        worst = 0.0
        for _ in range(50):
            p = params[rng.integers(len(params))]
            i = int(rng.integers(p.size))
            num = numeric_grad(lambda: loss().item(), p.data, E2E_STEP, [i])[i]
            worst = _worse(worst, relative_error(p.grad.reshape(-1)[i], num))
        g.add("end-to-end model (50 parameters)", worst <= 1e-3, f"max rel err {worst:.2e}")


def check_linear_attention(g, rng):
    worst = 0.0
    for _ in range(20):
        C, H, W = int(rng.integers(2, 17)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        x = rng.standard_normal((1, C, H, W)).astype(np.float32)
        # spatial keys have C/8 channels, so that path needs C >= 8
        ssa = SpatialAttention(8 * int(rng.integers(1, 3)), rng)
        xs = rng.standard_normal((1, ssa.proj_out.weight.shape[0], H, W)).astype(np.float32)
        with no_grad():
            fast = attention.linear_attention_spatial(Tensor(xs), ssa.proj_in).data
            ref, _ = brute_force_spatial_attention(xs, ssa.proj_in)
            worst = _worse(worst, np.abs(fast - ref).max())
            fast = attention.linear_attention_channel(Tensor(x)).data
            ref, _ = brute_force_channel_attention(x)
            worst = _worse(worst, np.abs(fast - ref).max())
    g.add("factorized == brute force (20 instances)", worst <= 1e-5, f"max abs diff {worst:.2e}")

    # constant values are reproduced exactly since every weight row sums to one
    worst = 0.0
    for _ in range(20):
        n, dk = int(rng.integers(1, 40)), int(rng.integers(1, 9))
        q, k = rng.standard_normal((n, dk)), rng.standard_normal((n, dk))
        v = np.full((n, 3), rng.standard_normal())
        out = attention.linear_attention(Tensor(q), Tensor(k), Tensor(v)).data
        worst = _worse(worst, np.abs(out - v).max())
    g.add("constant values preserved", worst <= 1e-6, f"max abs diff {worst:.2e}")


def reference_shifted_attention(x, attn, w, s):
    """Per-token softmax over the tokens it may see, written from scratch (float64).

    x is (H, W, C). After the cyclic shift, two tokens in the same window may
    attend to each other only if they were within ``w`` of each other before
    the shift, i.e. the window did not wrap between them.
    """
    H, W, C = x.shape
    h = attn.num_heads
    dh = C // h
    wq = attn.qkv.weight.data.astype(np.float64)
    qkv = x.reshape(-1, C) @ wq + attn.qkv.bias.data
    q, k, v = (qkv[:, i * C:(i + 1) * C].reshape(H * W, h, dh) for i in range(3))
    table = attn.relative_position_bias_table.data.astype(np.float64)
    out = np.zeros((H * W, h, dh))
    for wi in range(H // w):
        for wj in range(W // w):
            # rolled coordinates of this window and the original tokens they hold
            rr, cc = np.meshgrid(np.arange(wi * w, wi * w + w), np.arange(wj * w, wj * w + w),
                                 indexing="ij")
            orig_r, orig_c = (rr.ravel() + s) % H, (cc.ravel() + s) % W
            idx = orig_r * W + orig_c
            dr = orig_r[:, None] - orig_r[None, :]
            dc = orig_c[:, None] - orig_c[None, :]
            allowed = (np.abs(dr) < w) & (np.abs(dc) < w)
            # disallowed pairs may fall outside the table; they are masked anyway
            rel = np.clip((dr + w - 1) * (2 * w - 1) + (dc + w - 1), 0, len(table) - 1)
            bias = table[rel]
            for head in range(h):
                logits = q[idx, head] @ k[idx, head].T * attn.scale + bias[..., head]
                logits = np.where(allowed, logits, -np.inf)
                p = np.exp(logits - logits.max(axis=1, keepdims=True))
                p /= p.sum(axis=1, keepdims=True)
                out[idx, head] = p @ v[idx, head]
    out = out.reshape(H * W, C) @ attn.proj.weight.data + attn.proj.bias.data
    return out.reshape(H, W, C)


def check_window_attention(g, rng):
    with dtype_scope(np.float64):
        for H, W, w, s in ((8, 8, 4, 0), (8, 8, 4, 2), (12, 8, 4, 2), (6, 6, 2, 1)):
            C, heads = 8, 2
            attn = WindowAttention(C, w, heads, rng)
            # unit-scale weights so that masking errors are not hidden by tiny outputs
            for p in (attn.qkv.weight, attn.proj.weight, attn.relative_position_bias_table):
                p.data[...] = rng.standard_normal(p.shape) * 0.5
            x = rng.standard_normal((H, W, C))
            with no_grad():
                fast = window_msa(Tensor(x.reshape(1, H * W, C)), H, W,
                                  WindowSpec(w, s, heads), attn).data.reshape(H, W, C)
            ref = reference_shifted_attention(x, attn, w, s)
            err = float(np.abs(fast - ref).max())
            g.add(f"window msa {H}x{W} w={w} shift={s}", err <= 1e-9, f"max abs diff {err:.2e}")


def check_shapes(g, rng):
    cfg = preset("swin_nano", num_classes=6)
    model = DCSwin(cfg, "dcfam", seed=0)
    with no_grad():
        pyr, afs = model.features(Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32)))
    want = expected_pyramid_shapes(cfg, 1, 64, 64)
    g.add("swin_nano@64 pyramid", [tuple(t.shape) for t in pyr.as_list()] == want)
    g.add("swin_nano@64 aggregate", [tuple(t.shape) for t in afs] == want)
    big = preset("swin_s", num_classes=6)
    model = DCSwin(big, "dcfam", seed=0)
    with meta_mode():
        pyr, afs = model.features(Tensor(np.zeros((1, 3, 1024, 1024), np.float32)))
        logits = model(Tensor(np.zeros((1, 3, 1024, 1024), np.float32)))
    want = [(1, 96, 256, 256), (1, 192, 128, 128), (1, 384, 64, 64), (1, 768, 32, 32)]
    g.add("swin_s@1024 pyramid (dry run)", [tuple(t.shape) for t in pyr.as_list()] == want)
    g.add("swin_s@1024 aggregate (dry run)", [tuple(t.shape) for t in afs] == want)
    g.add("swin_s@1024 logits (dry run)", tuple(logits.shape) == (1, 6, 1024, 1024))
    n = model.encoder.num_parameters()
    g.add("swin_s backbone ~50M parameters", abs(n - 50e6) <= 5e6, f"{n:,}")


def check_dcfam(g, rng):
    cfg = preset("swin_nano", num_classes=3)
    x = Tensor(rng.standard_normal((2, 3, 64, 64)).astype(np.float32))
    dc, full = DCSwin(cfg, "dc", seed=0), DCSwin(cfg, "dcfam", seed=0)
    full.load_state_dict(dc.state_dict(), strict=False)
    full.decoder.identity_init_attention()
    with no_grad():
        a, b = dc.eval()(x).data, full.eval()(x).data
    g.add("identity attention: dcfam == dc", np.allclose(a, b, atol=1e-5),
          f"max abs diff {np.abs(a - b).max():.2e}")
    dec = full.decoder
    g.add("SSA shared", dec.ssa_af4 is dec.ssa_af3)
    g.add("SCA shared", dec.sca_af3 is dec.sca_af2)
    counts = {v: DCSwin(cfg, v, seed=0).num_parameters() for v in ("baseline", "dc", "dcfam",
                                                                   "dcfam_ns")}
    extra_ns = sum(p.size for p in (dec.ssa_af4.parameters() + dec.sca_af3.parameters()))
    g.add("parameter ordering", counts["baseline"] < counts["dc"] < counts["dcfam"]
          <= counts["dcfam_ns"], str(counts))
    g.add("unshared adds exactly one SSA+SCA", counts["dcfam_ns"] - counts["dcfam"] == extra_ns)

    # AF4 is additive in its two operands
    with no_grad():
        pyr = full.encoder(x)
        lhs = dec(pyr)[3].data
        rhs = pyr.st4.data + dec.down_af4_out(dec.ssa_af4(dec.down_af4_in(pyr.st2))).data
    g.add("AF4 = ST4 + D(SSA(D(ST2)))", np.allclose(lhs, rhs, atol=1e-5))


def check_metrics(g, rng):
    bad = 0
    for _ in range(200):
        K = int(rng.integers(2, 6))
        n = int(rng.integers(1, 50))
        t, p = rng.integers(0, K, n), rng.integers(0, K, n)
        cm = metrics.ConfusionMatrix(K).accumulate(t, p)
        oa = sum(int(a == b) for a, b in zip(t, p)) / n
        f1_ref, iou_ref = [], []
        for c in range(K):
            truth = {i for i in range(n) if t[i] == c}
            pred = {i for i in range(n) if p[i] == c}
            inter, union = len(truth & pred), len(truth | pred)
            iou_ref.append(inter / union if union else np.nan)
            den = len(truth) + len(pred)
            f1_ref.append(2 * inter / den if den else 0.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            f1 = metrics.f1_scores(cm).f1
        ok = abs(metrics.overall_accuracy(cm) - oa) <= 1e-9
        ok &= np.allclose(metrics.per_class_iou(cm), iou_ref, atol=1e-9, equal_nan=True)
        ok &= np.allclose(f1, f1_ref, atol=1e-9)
        bad += not ok
    g.add("OA / IoU / F1 vs set-based reference (200 pairs)", bad == 0, f"{bad} mismatches")


def check_data(g, rng):
    a, b = synth_scene(3), synth_scene(3)
    g.add("synthetic scenes deterministic",
          np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label))
    acc = np.mean([(nearest_color_classifier(s.image, 6) == s.label).mean()
                   for s in (synth_scene(i) for i in range(10))])
    g.add("colour oracle accuracy >= 0.9", acc >= 0.9, f"{acc:.4f}")
    lab = rng.integers(0, 6, (96, 80))
    tiles, smap = tile_array(lab, TileSpec(32))
    g.add("stitch(tile(x)) == x", np.array_equal(stitch(tiles, smap), lab))


GROUPS = {
    "kernels": check_kernels,
    "gradcheck": check_gradcheck,
    "linear-attention": check_linear_attention,
    "window-attention": check_window_attention,
    "shapes": check_shapes,
    "dcfam": check_dcfam,
    "metrics": check_metrics,
    "data": check_data,
}


# ---------------------------------------------------------------------------
# fault injection
# ---------------------------------------------------------------------------

def _fault_attention_offset(q, k, v, eps=attention.DEN_EPS):
    # drops the constant term of 1 + q.k
    qn, kn = ops.l2_normalize(q, -1), ops.l2_normalize(k, -1)
    num = ops.matmul(qn, ops.matmul(kn.transpose(-2, -1), v))
    den = ops.add(ops.matmul(qn, ops.sum(kn, axis=-2, keepdims=True).transpose(-2, -1)), eps)
    return ops.div(num, den)


def _fault_no_shift_mask(hp, wp, w, s):
    return np.zeros(((hp // w) * (wp // w), w * w, w * w))


def _fault_f1(cm):
    tp, fp, fn = cm.tp, cm.fp, cm.fn
    f1 = np.where(2 * tp + fp > 0, 2 * tp / np.maximum(2 * tp + fp, 1), 0.0)
    return metrics.F1Scores(f1, f1, f1, f1.mean(), f1.mean(), f1.mean())


FAULTS = {
    "attention-offset": (attention, "linear_attention", _fault_attention_offset),
    "missing-shift-mask": (attention, "shift_mask", _fault_no_shift_mask),
    "f1-ignores-fn": (metrics, "f1_scores", _fault_f1),
}


def pick_fault(seed):
    names = sorted(FAULTS)
    return names[int(np.random.default_rng(seed).integers(len(names)))]


@contextlib.contextmanager
def inject_fault(name):
    module, attr, replacement = FAULTS[name]
    saved = getattr(module, attr)
    setattr(module, attr, replacement)
    try:
        yield
    finally:
        setattr(module, attr, saved)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class VerifyReport:
    checks: list
    seconds: dict

    @property
    def failed_groups(self):
        return sorted({c.group for c in self.checks if not c.passed})

    def summary(self):
        lines = []
        for c in self.checks:
            mark = "PASS" if c.passed else "FAIL"
            lines.append(f"{mark}  {c.group:<17} {c.name}" + (f"  ({c.detail})" if c.detail else ""))
        total = len({c.group for c in self.checks})
        failed = self.failed_groups
        lines.append(f"{total - len(failed)}/{total} groups passed"
                     + (f"; failed: {', '.join(failed)}" if failed else ""))
        return "\n".join(lines) + "\n"


def run(groups=None, fault=None, seed=0):
    checks, seconds = [], {}
    ctx = inject_fault(fault) if fault else contextlib.nullcontext()
    with ctx:
        for name in groups or GROUPS:
            g = _Group(name)
            start = time.perf_counter()
            try:
                GROUPS[name](g, np.random.default_rng(seed))
            except Exception as exc:  # a crash counts as a failed group
                g.add("group raised", False, f"{type(exc).__name__}: {exc}")
            seconds[name] = time.perf_counter() - start
            checks.extend(g.checks)
    return VerifyReport(checks, seconds)
