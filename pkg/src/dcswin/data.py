"""Image/label I/O, tiling and stitching, synthetic scenes and augmentation.

Images are RGB only: an elevation (DSM) band is never read or produced.

Dataset layout on disk::

    root/manifest.tsv     # id<TAB>image<TAB>label, paths relative to root
    root/images/<id>.ppm  # binary P6, 8-bit
    root/labels/<id>.pgm  # binary P5, 8-bit class indices (255 = ignore)
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

IGNORE_LABEL = 255

# RGB per class, in [0, 1]; far apart relative to the 0.05 pixel noise.
CLASS_COLORS = np.array([
    [0.85, 0.85, 0.80],
    [0.20, 0.25, 0.75],
    [0.55, 0.85, 0.35],
    [0.10, 0.45, 0.15],
    [0.90, 0.80, 0.10],
    [0.75, 0.20, 0.20],
    [0.60, 0.30, 0.70],
    [0.15, 0.75, 0.80],
])

# Fixed colours for predicted label images (ISPRS-like for the first six classes).
PALETTE = np.array([
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
    [255, 0, 255],
    [128, 128, 128],
], dtype=np.uint8)


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.id}: image must be (3, H, W), got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise ValueError(f"{self.id}: label {self.label.shape} not aligned with "
                             f"image {self.image.shape[1:]}")


# ---------------------------------------------------------------------------
# netpbm I/O
# ---------------------------------------------------------------------------

def _read_header(buf, n_fields):
    fields, pos = [], 0
    while len(fields) < n_fields:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    return fields, pos + 1


def _read_netpbm(path, magic):
    with open(path, "rb") as fh:
        buf = fh.read()
    (m, w, h, maxval), offset = _read_header(buf, 4)
    if m != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, got {m!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return np.frombuffer(buf, dtype=np.uint8, offset=offset), h, w


def read_ppm(path):
    """Read a binary PPM as float32 (3, H, W) in [0, 1]."""
    data, h, w = _read_netpbm(path, b"P6")
    return data[:h * w * 3].reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def write_ppm(path, image):
    """Write (3, H, W) floats in [0, 1] or uint8 (H, W, 3) RGB."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_pgm(path):
    data, h, w = _read_netpbm(path, b"P5")
    return data[:h * w].reshape(h, w).astype(np.int64)


def write_pgm(path, label):
    arr = np.asarray(label)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("PGM labels must be in [0, 255]")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(arr.astype(np.uint8).tobytes())


def colorize(label):
    """Map class indices to the fixed palette; returns uint8 (H, W, 3)."""
    label = np.asarray(label)
    out = np.zeros(label.shape + (3,), dtype=np.uint8)
    valid = label < len(PALETTE)
    out[valid] = PALETTE[label[valid]]
    return out


def load_dataset(root):
    """Load every sample listed in ``root/manifest.tsv``."""
    manifest = os.path.join(root, "manifest.tsv")
    samples = []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{manifest}:{lineno}: expected id, image, label columns")
            sid, img, lab = parts
            samples.append(Sample(read_ppm(os.path.join(root, img)),
                                  read_pgm(os.path.join(root, lab)), sid))
    return samples


def save_dataset(root, samples):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    with open(os.path.join(root, "manifest.tsv"), "w") as fh:
        for s in samples:
            img, lab = f"images/{s.id}.ppm", f"labels/{s.id}.pgm"
            write_ppm(os.path.join(root, img), s.image)
            write_pgm(os.path.join(root, lab), s.label)
            fh.write(f"{s.id}\t{img}\t{lab}\n")


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TileSpec:
    tile: int = 1024
    stride: int = 0

    def __post_init__(self):
        if self.tile <= 0:
            raise ValueError(f"tile size must be positive, got {self.tile}")
        if self.stride == 0:
            object.__setattr__(self, "stride", self.tile)
        if not 0 < self.stride <= self.tile:
            raise ValueError(f"stride must be in (0, tile], got {self.stride}")


@dataclass
class StitchMap:
    height: int
    width: int
    padded: tuple
    tile: int
    origins: list


def _starts(size, tile, stride):
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] + tile < size:
        starts.append(size - tile)
    return starts


def tile_array(arr, spec):
    """Cut the trailing (H, W) axes into tiles; returns (tiles, StitchMap).

    Arrays smaller than the tile are reflect-padded up to it first. Tiles are
    emitted in row-major order; the last row/column is aligned to the border.
    """
    arr = np.asarray(arr)
    H, W = arr.shape[-2:]
    ph, pw = max(0, spec.tile - H), max(0, spec.tile - W)
    if ph or pw:
        width = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
        mode = "reflect" if H > ph and W > pw else "symmetric"
        arr = np.pad(arr, width, mode=mode)
    Hp, Wp = arr.shape[-2:]
    origins = [(y, x) for y in _starts(Hp, spec.tile, spec.stride)
               for x in _starts(Wp, spec.tile, spec.stride)]
    t = spec.tile
    tiles = [arr[..., y:y + t, x:x + t] for y, x in origins]
    return tiles, StitchMap(H, W, (Hp, Wp), t, origins)


def tile(image, label, spec):
    """Tile an aligned image/label pair into Samples."""
    img_tiles, smap = tile_array(image, spec)
    lab_tiles, _ = tile_array(label, spec)
    samples = [Sample(np.ascontiguousarray(i), np.ascontiguousarray(l), f"tile_{y}_{x}")
               for i, l, (y, x) in zip(img_tiles, lab_tiles, smap.origins)]
    return samples, smap


def stitch(tiles, smap):
    """Reassemble per-tile outputs; overlapping pixels are averaged."""
    first = np.asarray(tiles[0])
    lead = first.shape[:-2]
    acc = np.zeros(lead + smap.padded, dtype=np.float64)
    hits = np.zeros(smap.padded, dtype=np.float64)
    t = smap.tile
    for arr, (y, x) in zip(tiles, smap.origins):
        acc[..., y:y + t, x:x + t] += arr
        hits[y:y + t, x:x + t] += 1
    out = (acc / hits)[..., :smap.height, :smap.width]
    if np.issubdtype(first.dtype, np.integer):
        return np.rint(out).astype(first.dtype)
    return out.astype(first.dtype)


def predict_tiled(fn, image, spec):
    """Apply ``fn`` (C, h, w) -> (K, h, w) tile by tile and stitch the outputs."""
    tiles, smap = tile_array(image, spec)
    return stitch([fn(np.ascontiguousarray(t)) for t in tiles], smap)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def _draw(label, rng, cls):
    H, W = label.shape
    size = min(H, W)
    yy, xx = np.mgrid[0:H, 0:W]
    kind = rng.integers(3)
    if kind == 0:
        h, w = rng.integers(size // 4, size // 2 + 1, size=2)
        y, x = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
        label[y:y + h, x:x + w] = cls
    elif kind == 1:
        r = rng.integers(max(2, size // 8), size // 4 + 1)
        cy, cx = rng.integers(0, H), rng.integers(0, W)
        label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    else:
        width = rng.integers(max(2, size // 6), size // 4 + 1)
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(-size / 2, size / 2)
        dist = (xx - W / 2) * np.cos(theta) + (yy - H / 2) * np.sin(theta) - offset
        label[np.abs(dist) <= width / 2] = cls


def synth_scene(seed, size=64, num_classes=6, noise=0.05, max_attempts=500):
    """Deterministic scene of rectangles, discs and stripes over a class-0 background.

    Every class covers between 5% and 60% of the pixels. Pixel colour is the
    class colour plus Gaussian noise, so labels are exact by construction.
    """
    if not 2 <= num_classes <= len(CLASS_COLORS):
        raise ValueError(f"num_classes must be in [2, {len(CLASS_COLORS)}]")
    rng = np.random.default_rng(seed)
    H = W = int(size)
    for _ in range(max_attempts):
        label = np.zeros((H, W), dtype=np.int64)
        target_bg = rng.uniform(0.42, 0.55)
        for _ in range(12 * num_classes):
            freq = np.bincount(label.reshape(-1), minlength=num_classes) / label.size
            if freq[0] <= target_bg and freq[1:].min() >= 0.05:
                break
            short = np.flatnonzero(freq[1:] < 0.05) + 1
            cls = rng.choice(short) if short.size else rng.integers(1, num_classes)
            _draw(label, rng, int(cls))
        freq = np.bincount(label.reshape(-1), minlength=num_classes) / label.size
        if freq.min() >= 0.05 and freq.max() <= 0.60:
            break
    else:
        raise RuntimeError(f"seed {seed}: no valid scene within {max_attempts} attempts")
    colors = CLASS_COLORS[:num_classes].T[:, label]
    image = np.clip(colors + rng.normal(0.0, noise, size=colors.shape), 0.0, 1.0)
    return Sample(image.astype(np.float32), label, f"synth_{seed}")


def synth_dataset(n, size=64, num_classes=6, seed=0):
    return [synth_scene(seed * 100_003 + i, size, num_classes) for i in range(n)]


def nearest_color_classifier(image, num_classes):
    """Colour-threshold reference: assign each pixel the nearest class colour."""
    cols = CLASS_COLORS[:num_classes]
    d = ((image[None] - cols[:, :, None, None]) ** 2).sum(axis=1)
    return d.argmin(axis=0)


# ---------------------------------------------------------------------------
# augmentation and normalization
# ---------------------------------------------------------------------------

def dihedral(arr, k):
    """One of the 8 square symmetries on the last two axes (k in [0, 8))."""
    arr = np.rot90(arr, k % 4, axes=(-2, -1))
    if k >= 4:
        arr = arr[..., ::-1]
    return np.ascontiguousarray(arr)


def augment(sample, seed):
    """Random flip/rotation applied identically to image and label."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = int(rng.integers(8))
    return Sample(dihedral(sample.image, k), dihedral(sample.label, k), sample.id)


def compute_norm_stats(samples):
    """Per-channel mean and std over all training pixels."""
    stack = np.concatenate([s.image.reshape(3, -1) for s in samples], axis=1).astype(np.float64)
    mean = stack.mean(axis=1)
    std = np.maximum(stack.std(axis=1), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(image, stats):
    mean, std = stats
    return ((image - mean[:, None, None]) / std[:, None, None]).astype(np.float32)
