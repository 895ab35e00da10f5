"""Densely connected feature aggregation decoder and the full segmentation model.

Channel plan for base width C (C = 96 gives the 96/192/384/768 ladder)::

    AF4 [8C @ H/32] = ST4 + D(4C->8C)(SSA(D(2C->4C)(ST2)))
    AF3 [4C @ H/16] = SSA(ST3) + D(2C->4C)(SCA(D(C->2C)(ST1)))
    AF2 [2C @ H/8]  = SCA(ST2) + LU(8C->2C)(AF4)
    AF1 [C  @ H/4]  = ST1 + align(U(AF2)) + LU(4C->C)(AF3)

``U`` is bilinear x2. ``align`` is a 1x1 conv 2C -> C: without it the AF1 sum
mixes 2C and C channels and cannot be evaluated.
"""

from __future__ import annotations

import numpy as np

from .attention import ChannelAttention, SpatialAttention
from .encoder import ModelConfig, SwinEncoder
from .tensor import ops
from .tensor.core import ShapeError
from .tensor.nn import Conv2d, ConvBN, ConvTranspose2d, Identity, Module

VARIANTS = ("baseline", "dc", "dcfam_ns", "dcfam")


class DownsampleConnection(Module):
    """``relu(delta(x) + mu(theta(x)))``: two stride-2 branches, one with a stride-1 pre-conv."""

    def __init__(self, cin, cout, rng):
        self.delta = ConvBN(cin, cout, 3, rng, stride=2, padding=1)
        self.theta = ConvBN(cin, cin, 3, rng, stride=1, padding=1)
        self.mu = ConvBN(cin, cout, 3, rng, stride=2, padding=1)

    def forward(self, x):
        return ops.relu(ops.add(self.delta(x), self.mu(self.theta(x))))


class DilatedUpsample(Module):
    """1x1 conv, 3x3 conv with the given dilation, then a stride-2 transpose conv."""

    def __init__(self, cin, cout, rate, rng):
        self.reduce = Conv2d(cin, cout, 1, rng)
        self.dilated = Conv2d(cout, cout, 3, rng, padding=rate, dilation=rate)
        self.up = ConvTranspose2d(cout, cout, 2, rng, stride=2)

    def forward(self, x):
        return self.up(self.dilated(self.reduce(x)))


class LargeFieldUpsample(Module):
    """Two dilated upsampling steps (rates 6 then 12) with a ReLU between; x4 overall."""

    def __init__(self, cin, cout, rng):
        self.phi6 = DilatedUpsample(cin, cout, 6, rng)
        self.phi12 = DilatedUpsample(cout, cout, 12, rng)

    def forward(self, x):
        return self.phi12(ops.relu(self.phi6(x)))


def downsample_connection(x, module):
    return module(x)


def large_field_upsample(x, module):
    return module(x)


def _join(edge, *terms):
    shapes = {tuple(t.shape) for t in terms}
    if len(shapes) != 1:
        raise ShapeError(f"{edge}: operand shapes disagree {[tuple(t.shape) for t in terms]}")
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out


class DCFAM(Module):
    """The aggregation graph.

    ``attention`` selects how SSA/SCA are realised: ``"shared"`` uses one
    spatial and one channel module at both of their call sites, ``"unshared"``
    gives every site its own module, ``"none"`` replaces them with identity.
    """

    def __init__(self, base, rng, attention="shared"):
        C = base
        self.down_af4_in = DownsampleConnection(2 * C, 4 * C, rng)
        self.down_af4_out = DownsampleConnection(4 * C, 8 * C, rng)
        self.down_af3_in = DownsampleConnection(C, 2 * C, rng)
        self.down_af3_out = DownsampleConnection(2 * C, 4 * C, rng)
        self.lu_af2 = LargeFieldUpsample(8 * C, 2 * C, rng)
        self.lu_af1 = LargeFieldUpsample(4 * C, C, rng)
        self.align = Conv2d(2 * C, C, 1, rng)
        self.attention = attention
        if attention == "shared":
            ssa, sca = SpatialAttention(4 * C, rng), ChannelAttention()
            self.ssa_af4 = self.ssa_af3 = ssa
            self.sca_af3 = self.sca_af2 = sca
        elif attention == "unshared":
            self.ssa_af4 = SpatialAttention(4 * C, rng)
            self.ssa_af3 = SpatialAttention(4 * C, rng)
            self.sca_af3 = ChannelAttention()
            self.sca_af2 = ChannelAttention()
        elif attention == "none":
            self.ssa_af4 = self.ssa_af3 = Identity()
            self.sca_af3 = self.sca_af2 = Identity()
        else:
            raise ValueError(f"unknown attention mode {attention!r}")

    def forward(self, pyr):
        st1, st2, st3, st4 = pyr.as_list()
        af4 = _join("AF4 = ST4 + D(SSA(D(ST2)))",
                    st4, self.down_af4_out(self.ssa_af4(self.down_af4_in(st2))))
        af3 = _join("AF3 = SSA(ST3) + D(SCA(D(ST1)))",
                    self.ssa_af3(st3), self.down_af3_out(self.sca_af3(self.down_af3_in(st1))))
        af2 = _join("AF2 = SCA(ST2) + LU(AF4)", self.sca_af2(st2), self.lu_af2(af4))
        af1 = _join("AF1 = ST1 + align(U(AF2)) + LU(AF3)",
                    st1, self.align(ops.bilinear_upsample(af2, 2)), self.lu_af1(af3))
        return af1, af2, af3, af4

    def identity_init_attention(self):
        for m in (self.ssa_af4, self.ssa_af3, self.sca_af3, self.sca_af2):
            if hasattr(m, "identity_init"):
                m.identity_init()


def aggregate(pyramid, decoder):
    return decoder(pyramid)


class DirectUpsampleDecoder(Module):
    """Ablation baseline: project ST2..ST4 to C channels, upsample bilinearly, sum with ST1."""

    def __init__(self, base, rng):
        self.proj = [Conv2d(base * 2 ** i, base, 1, rng) for i in range(1, 4)]

    def forward(self, pyr):
        feats = pyr.as_list()
        terms = [feats[0]]
        for i, (conv, st) in enumerate(zip(self.proj, feats[1:]), start=1):
            terms.append(ops.bilinear_upsample(conv(st), 2 ** i))
        return (_join("direct upsample sum", *terms),)


class SegmentationHead(Module):
    """conv3x3-BN-ReLU, 1x1 conv to class logits, bilinear x4 to input resolution."""

    def __init__(self, channels, num_classes, rng, scale=4):
        if num_classes < 2:
            raise ValueError("segmentation head needs at least 2 classes")
        self.fuse = ConvBN(channels, channels, 3, rng, padding=1)
        self.classify = Conv2d(channels, num_classes, 1, rng)
        self.scale = scale

    def forward(self, af1):
        logits = self.classify(ops.relu(self.fuse(af1)))
        return ops.bilinear_upsample(logits, self.scale)


def segmentation_head(af1, head):
    return head(af1)


def mirror_pad(image, pad_h, pad_w):
    """Symmetric padding at the bottom/right by index gathering (differentiable).

    Zero padding would turn whole patches into constant tokens; every later
    layer norm sees a zero-variance row there and scales its gradient by
    1/sqrt(eps), which compounds through the blocks.
    """
    if not (pad_h or pad_w):
        return image
    H, W = image.shape[-2:]
    rows = np.pad(np.arange(H), (0, pad_h), mode="symmetric")
    cols = np.pad(np.arange(W), (0, pad_w), mode="symmetric")
    return image[:, :, rows[:, None], cols[None, :]]


class DCSwin(Module):
    """Encoder + decoder variant + head. Inputs are mirror-padded to a multiple of 32."""

    def __init__(self, cfg: ModelConfig, variant="dcfam", seed=0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        rng = np.random.default_rng(seed)
        self.cfg, self.variant = cfg, variant
        self.encoder = SwinEncoder(cfg, rng)
        C = cfg.embed_dim
        if variant == "baseline":
            self.decoder = DirectUpsampleDecoder(C, rng)
        else:
            mode = {"dc": "none", "dcfam_ns": "unshared", "dcfam": "shared"}[variant]
            self.decoder = DCFAM(C, rng, attention=mode)
        self.head = SegmentationHead(C, cfg.num_classes, rng, scale=cfg.patch_size)

    @property
    def stride(self):
        return self.cfg.patch_size * 8

    def features(self, image):
        pyr = self.encoder(image)
        return pyr, self.decoder(pyr)

    def forward(self, image):
        H, W = image.shape[-2:]
        s = self.stride
        image = mirror_pad(image, (-H) % s, (-W) % s)
        _, afs = self.features(image)
        logits = self.head(afs[0])
        if logits.shape[-2:] != (H, W):
            logits = logits[:, :, :H, :W]
        return logits


def ablation_variant(name, cfg, seed=0):
    return DCSwin(cfg, variant=name, seed=seed)


def expected_aggregate_shapes(cfg, batch, H, W):
    """(AF1, AF2, AF3, AF4) shapes; identical to the encoder ladder."""
    from .encoder import expected_pyramid_shapes

    return expected_pyramid_shapes(cfg, batch, H, W)
