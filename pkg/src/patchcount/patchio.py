"""Image ingestion, preprocessing, patch flattening, and synthetic data.

Images are numpy arrays of shape (H, W, 3), float32, values in [0, 1].
The only mandatory decode format is binary PPM (P6, maxval 255); synthetic
datasets are persisted as PPM files plus a labels.tsv with count labels.
Labels are image-level totals only: nothing in this module stores or
exposes per-dot coordinates.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

TILE_SIDE = 384
FULL_H, FULL_W = 768, 1152


class PPMError(ValueError):
    """Malformed PPM/PGM payload; carries the offending byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _read_header_ints(buf, pos, count):
    """Parse `count` whitespace-separated ASCII ints, honoring # comments."""
    values = []
    while len(values) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PPMError("expected ASCII integer in header", start)
        values.append(int(buf[start:pos]))
    return values, pos


def _load_netpbm(path, magic, channels):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != magic:
        raise PPMError(f"bad magic {buf[:2]!r}, expected {magic.decode()}", 0)
    (width, height, maxval), pos = _read_header_ints(buf, 2, 3)
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}, only 255", 2)
    pos += 1  # single whitespace byte after maxval
    expected = width * height * channels
    payload = buf[pos : pos + expected]
    if len(payload) < expected:
        raise PPMError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}", pos)
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    shape = (height, width, channels) if channels == 3 else (height, width)
    return pixels.reshape(shape)


def load_ppm(path):
    """Decode a binary PPM (P6, maxval 255) into an (H, W, 3) float image."""
    return _load_netpbm(path, b"P6", 3)


def load_pgm(path):
    """Decode a binary PGM (P5, maxval 255) into an (H, W) float image."""
    return _load_netpbm(path, b"P5", 1)


def save_ppm(img, path):
    """Write an (H, W, 3) float image in [0, 1] as binary PPM P6."""
    h, w, _ = img.shape
    payload = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(payload.tobytes())


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with half-pixel centers (align-corners false).

    Returns the input untouched when the size is unchanged.
    """
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img

    def _coords(n_out, n_in):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (src - lo).astype(np.float32)
        return lo, hi, frac

    y0, y1, fy = _coords(out_h, h)
    x0, x1, fx = _coords(out_w, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def split_tiles(img):
    """Partition a 768x1152 image into six 384x384 tiles, row-major."""
    h, w = img.shape[:2]
    if (h, w) != (FULL_H, FULL_W):
        raise ValueError(
            f"split_tiles requires a {FULL_H}x{FULL_W} image, got {h}x{w}; resize first")
    return [img[r * TILE_SIDE : (r + 1) * TILE_SIDE, c * TILE_SIDE : (c + 1) * TILE_SIDE]
            for r in range(2) for c in range(3)]


def patchify(img, patch_size):
    """Flatten an image into its sequence of row-major K x K x 3 patches.

    Output shape is [N, K*K*3] with N = (H/K)*(W/K), patches ordered
    row-major over the patch grid.
    """
    h, w, c = img.shape
    k = patch_size
    if h % k or w % k:
        raise ValueError(f"image {h}x{w} not divisible by patch size {k}")
    gh, gw = h // k, w // k
    grid = img.reshape(gh, k, gw, k, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(grid.reshape(gh * gw, k * k * c))


def unpatchify(seq, h, w, patch_size):
    """Inverse of patchify: rebuild the (h, w, 3) image bit-exactly."""
    k = patch_size
    gh, gw = h // k, w // k
    grid = seq.reshape(gh, gw, k, k, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(grid.reshape(h, w, 3))


def augment(img, rng, p_flip=0.5, p_gray=0.1):
    """Random horizontal flip and random grayscaling; count label unaffected."""
    if rng.random() < p_flip:
        img = img[:, ::-1, :]
    if rng.random() < p_gray:
        lum = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
        img = np.repeat(lum[..., None], 3, axis=2)
    return np.ascontiguousarray(img, dtype=np.float32)


def normalize(img, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Per-channel standardization; output no longer confined to [0, 1]."""
    return ((img - mean) / std).astype(np.float32)


@dataclass
class SynthSpec:
    """Parameters of the synthetic dot-crowd generator.

    ``region`` restricts dot centers to a fractional (y0, y1, x0, x1) box
    of the canvas; the default covers everything.
    """

    side: int = 64
    count_min: int = 0
    count_max: int = 30
    dot_radius: float = 2.0
    noise_amp: float = 0.1
    seed: int = 0
    region: tuple = field(default=(0.0, 1.0, 0.0, 1.0))

    def __post_init__(self):
        if self.count_min > self.count_max:
            raise ValueError("count_min must be <= count_max")
        if self.dot_radius < 1:
            raise ValueError("dot_radius must be >= 1")
        if self.side < 4 * self.dot_radius:
            raise ValueError(
                f"canvas side {self.side} too small for dot radius {self.dot_radius}")


def synth_generate(spec, n_images):
    """Generate (image, count) pairs: noisy background plus Gaussian dots.

    Deterministic given spec.seed. Only the total count is returned as the
    label; dot positions are discarded.
    """
    rng = np.random.default_rng(spec.seed)
    side = spec.side
    sigma = spec.dot_radius / 2.0
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    y0f, y1f, x0f, x1f = spec.region
    out = []
    for _ in range(n_images):
        count = int(rng.integers(spec.count_min, spec.count_max + 1))
        img = rng.uniform(0.0, spec.noise_amp, size=(side, side, 3)).astype(np.float32)
        for _ in range(count):
            cy = rng.uniform(y0f * side, y1f * side)
            cx = rng.uniform(x0f * side, x1f * side)
            dot = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
            img += dot[..., None]
        out.append((np.clip(img, 0.0, 1.0).astype(np.float32), float(count)))
    return out


def write_dataset(pairs, out_dir):
    """Persist (image, count) pairs as PPM files plus labels.tsv."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, (img, count) in enumerate(pairs):
        name = f"img_{i:05d}.ppm"
        save_ppm(img, os.path.join(out_dir, name))
        lines.append(f"{name}\t{count:g}\n")
    with open(os.path.join(out_dir, "labels.tsv"), "w") as fh:
        fh.writelines(lines)


@dataclass
class PatchBatch:
    """A batch of flattened patch sequences with count-level labels only.

    ``data`` holds one row of sequences per tile, [M * tiles_per_image, N,
    K*K*3]; tiles of the same image are consecutive. ``labels`` has one
    image-level count per image; the sum of an image's tile predictions is
    supervised against it.
    """

    data: np.ndarray
    labels: np.ndarray
    tiles_per_image: int = 1

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"patch data must be [M, N, P], got {self.data.shape}")
        if self.data.shape[0] != len(self.labels) * self.tiles_per_image:
            raise ValueError("sequence count does not match images * tiles_per_image")
        if np.any(np.asarray(self.labels) < 0):
            raise ValueError("count labels must be non-negative")

    @property
    def batch(self):
        return len(self.labels)

    @property
    def seq_len(self):
        return self.data.shape[1]

    @property
    def patch_dim(self):
        return self.data.shape[2]


def make_batch(pairs, patch_size, rng=None, standardize=True,
               p_flip=0.5, p_gray=0.1):
    """Turn (image, count) pairs into a PatchBatch.

    Images matching the model's tile size pass through whole; 768x1152
    inputs are split into the six standard tiles first. Augmentation is
    applied per tile when ``rng`` is given.
    """
    sequences = []
    labels = []
    tiles_per_image = None
    for img, count in pairs:
        h, w = img.shape[:2]
        tiles = split_tiles(img) if (h, w) == (FULL_H, FULL_W) else [img]
        if tiles_per_image is None:
            tiles_per_image = len(tiles)
        elif tiles_per_image != len(tiles):
            raise ValueError("mixed tile counts within one batch")
        for tile in tiles:
            if rng is not None:
                tile = augment(tile, rng, p_flip=p_flip, p_gray=p_gray)
            if standardize:
                tile = normalize(tile)
            sequences.append(patchify(tile, patch_size))
        labels.append(count)
    return PatchBatch(data=np.stack(sequences),
                      labels=np.asarray(labels, dtype=np.float32),
                      tiles_per_image=tiles_per_image)


def load_dataset(data_dir):
    """Load a PPM + labels.tsv directory back into (image, count) pairs."""
    pairs = []
    with open(os.path.join(data_dir, "labels.tsv")) as fh:
        for line in fh:
            if not line.strip():
                continue
            name, count = line.rstrip("\n").split("\t")
            pairs.append((load_ppm(os.path.join(data_dir, name)), float(count)))
    return pairs
