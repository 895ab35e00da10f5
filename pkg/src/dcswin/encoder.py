"""Hierarchical windowed-attention encoder producing four feature taps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import WindowAttention, WindowSpec, window_msa
from .tensor import ops
from .tensor.core import ShapeError
from .tensor.nn import Conv2d, LayerNorm, Linear, Module


@dataclass
class ModelConfig:
    name: str = "swin_nano"
    embed_dim: int = 32
    depths: list = field(default_factory=lambda: [2, 2, 2, 2])
    num_heads: list = field(default_factory=lambda: [2, 4, 8, 16])
    window_size: int = 4
    patch_size: int = 4
    num_classes: int = 2
    mlp_ratio: float = 4.0
    img_size: int = 64

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ValueError("depths and num_heads need one entry per stage (4)")
        for i, (d, h) in enumerate(zip(self.depths, self.num_heads)):
            if d < 1:
                raise ValueError(f"stage {i + 1} needs at least one block")
            if (self.embed_dim * 2 ** i) % h:
                raise ValueError(f"stage {i + 1}: {h} heads do not divide "
                                 f"{self.embed_dim * 2 ** i} channels")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def stage_dims(self):
        return [self.embed_dim * 2 ** i for i in range(4)]

    def stage_resolution(self, i):
        return max(1, self.img_size // self.patch_size // 2 ** i)

    def stage_window(self, i):
        """Effective (window, shift) for stage ``i``; tiny stages use one unshifted window."""
        res = self.stage_resolution(i)
        if res <= self.window_size:
            return res, 0
        return self.window_size, self.window_size // 2

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "swin_t": dict(embed_dim=96, depths=[2, 2, 6, 2], num_heads=[3, 6, 12, 24],
                   window_size=7, img_size=1024),
    "swin_s": dict(embed_dim=96, depths=[2, 2, 18, 2], num_heads=[3, 6, 12, 24],
                   window_size=7, img_size=1024),
    "swin_b": dict(embed_dim=128, depths=[2, 2, 18, 2], num_heads=[4, 8, 16, 32],
                   window_size=7, img_size=1024),
    "swin_l": dict(embed_dim=192, depths=[2, 2, 18, 2], num_heads=[6, 12, 24, 48],
                   window_size=7, img_size=1024),
    "swin_nano": dict(embed_dim=32, depths=[2, 2, 2, 2], num_heads=[2, 4, 8, 16],
                      window_size=4, img_size=64),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(name=name, **{**PRESETS[name], **overrides})


@dataclass
class FeaturePyramid:
    st1: object
    st2: object
    st3: object
    st4: object

    def as_list(self):
        return [self.st1, self.st2, self.st3, self.st4]

    def shapes(self):
        return [tuple(t.shape) for t in self.as_list()]


class PatchEmbed(Module):
    """Split into non-overlapping patches, project raw pixel values, layer-normalize."""

    def __init__(self, patch, dim, rng, in_chans=3):
        self.patch, self.in_chans = patch, in_chans
        self.proj = Linear(in_chans * patch * patch, dim, rng)
        self.norm = LayerNorm(dim)

    def forward(self, image):
        B, C, H, W = image.shape
        if C != self.in_chans:
            raise ShapeError(f"expected {self.in_chans}-channel input, got {C}")
        p = self.patch
        image = ops.pad2d(image, (0, (-H) % p), (0, (-W) % p))
        Hp, Wp = image.shape[2] // p, image.shape[3] // p
        x = image.reshape(B, C, Hp, p, Wp, p).permute(0, 2, 4, 1, 3, 5)
        x = x.reshape(B, Hp * Wp, C * p * p)
        return self.norm(self.proj(x)), Hp, Wp


class PatchMerging(Module):
    """Concatenate each 2x2 token neighbourhood (4D), normalize, project to 2D."""

    def __init__(self, dim, rng):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    @staticmethod
    def gather(x, H, W):
        B, L, C = x.shape
        x = x.reshape(B, H, W, C)
        x = ops.pad(x, [(0, 0), (0, H % 2), (0, W % 2), (0, 0)])
        H2, W2 = (H + 1) // 2, (W + 1) // 2
        # channel blocks ordered (h0,w0), (h1,w0), (h0,w1), (h1,w1)
        x = x.reshape(B, H2, 2, W2, 2, C).permute(0, 1, 3, 4, 2, 5)
        return x.reshape(B, H2 * W2, 4 * C), H2, W2

    def forward(self, x, H, W):
        x, H2, W2 = self.gather(x, H, W)
        return self.reduction(self.norm(x)), H2, W2


class SwinBlock(Module):
    def __init__(self, dim, num_heads, window, shift, mlp_ratio, rng):
        self.spec = WindowSpec(window, shift, num_heads)
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, window, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x, H, W):
        x = ops.add(x, window_msa(self.norm1(x), H, W, self.spec, self.attn))
        return ops.add(x, self.fc2(ops.gelu(self.fc1(self.norm2(x)))))

    def zero_residual_branches(self):
        for layer in (self.attn.proj, self.fc2):
            layer.weight.data[...] = 0
            layer.bias.data[...] = 0


def swin_block_pair(tokens, H, W, pair):
    """Run a (W-MSA, SW-MSA) block pair."""
    first, second = pair
    return second(first(tokens, H, W), H, W)


class Stage(Module):
    def __init__(self, index, cfg, rng):
        dim = cfg.stage_dims[index]
        window, shift = cfg.stage_window(index)
        self.downsample = PatchMerging(dim // 2, rng) if index > 0 else None
        self.blocks = [
            SwinBlock(dim, cfg.num_heads[index], window, shift if b % 2 else 0,
                      cfg.mlp_ratio, rng)
            for b in range(cfg.depths[index])
        ]

    def forward(self, x, H, W):
        if self.downsample is not None:
            x, H, W = self.downsample(x, H, W)
        for block in self.blocks:
            x = block(x, H, W)
        return x, H, W


class SwinEncoder(Module):
    """Patch embedding, four stages, and a channel-preserving 1x1 conv tap per stage."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim, rng)
        self.stages = [Stage(i, cfg, rng) for i in range(4)]
        self.taps = [Conv2d(d, d, 1, rng) for d in cfg.stage_dims]

    def forward(self, image):
        x, H, W = self.patch_embed(image)
        B = image.shape[0]
        feats = []
        for stage, tap in zip(self.stages, self.taps):
            x, H, W = stage(x, H, W)
            C = x.shape[-1]
            fmap = x.reshape(B, H, W, C).permute(0, 3, 1, 2)
            feats.append(tap(fmap))
        return FeaturePyramid(*feats)


def encode(encoder, image):
    return encoder(image)


def expected_pyramid_shapes(cfg, batch, H, W):
    """Ladder law: channels double and resolution halves per stage."""
    out = []
    h, w = -(-H // cfg.patch_size), -(-W // cfg.patch_size)
    for i, d in enumerate(cfg.stage_dims):
        if i:
            h, w = -(-h // 2), -(-w // 2)
        out.append((batch, d, h, w))
    return out


def count_parameters(module):
    return int(np.sum([p.size for p in module.parameters()]))
