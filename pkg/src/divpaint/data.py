"""Datasets and masks.

Masks use the convention 1 = missing pixel. The synthetic shapes corpus is the
desk-scale stand-in for photographic datasets: colored geometric shapes over
textured backgrounds, so coarse latents end up carrying layout while fine
latents carry grain. All generation is pure given a seed; per-item seeds are
derived so items can be produced independently.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DataConfig

DEFAULT_FILL = 0.5


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def make_center_mask(height: int, width: int) -> np.ndarray:
    """Centered hole covering half the image side in each dimension."""
    mask = np.zeros((height, width), dtype=np.float32)
    hole_h, hole_w = height // 2, width // 2
    top = (height - hole_h) // 2
    left = (width - hole_w) // 2
    mask[top:top + hole_h, left:left + hole_w] = 1.0
    return mask


def make_random_mask(
    height: int,
    width: int,
    seed_or_rng: int | np.random.Generator,
    cfg: DataConfig | None = None,
    max_attempts: int = 100,
) -> np.ndarray:
    """Union of random rectangles and brush strokes.

    The hole fraction is clamped to [cfg.hole_fraction_min, cfg.hole_fraction_max]
    by regeneration; after `max_attempts` rejected draws the center mask is
    returned instead.
    """
    cfg = cfg or DataConfig()
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    for _ in range(max_attempts):
        mask = _draw_random_mask(height, width, rng, cfg)
        frac = float(mask.mean())
        if cfg.hole_fraction_min <= frac <= cfg.hole_fraction_max:
            return mask
    return make_center_mask(height, width)


def _draw_random_mask(height: int, width: int, rng: np.random.Generator, cfg: DataConfig) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.float32)
    side = min(height, width)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float32)

    n_rects = int(rng.integers(cfg.rect_count_min, cfg.rect_count_max + 1))
    for _ in range(n_rects):
        rect_h = int(rng.uniform(cfg.rect_frac_min, cfg.rect_frac_max) * height)
        rect_w = int(rng.uniform(cfg.rect_frac_min, cfg.rect_frac_max) * width)
        top = int(rng.integers(0, max(height - rect_h, 0) + 1))
        left = int(rng.integers(0, max(width - rect_w, 0) + 1))
        mask[top:top + rect_h, left:left + rect_w] = 1.0

    n_strokes = int(rng.integers(cfg.stroke_count_min, cfg.stroke_count_max + 1))
    for _ in range(n_strokes):
        n_vertices = int(rng.integers(cfg.stroke_vertices_min, cfg.stroke_vertices_max + 1))
        radius = 0.5 * rng.uniform(cfg.stroke_width_min, cfg.stroke_width_max) * side
        vertices = [np.array([rng.uniform(0, height), rng.uniform(0, width)])]
        for _ in range(n_vertices - 1):
            angle = rng.uniform(0, 2 * np.pi)
            step = rng.uniform(0.05, 0.25) * side
            nxt = vertices[-1] + step * np.array([np.sin(angle), np.cos(angle)])
            vertices.append(np.clip(nxt, 0, [height - 1, width - 1]))
        for a, b in zip(vertices[:-1], vertices[1:]):
            _stamp_segment(mask, ys, xs, a, b, radius)
    return mask


def _stamp_segment(mask, ys, xs, a, b, radius) -> None:
    # thick segment with disc caps: pixels within `radius` of the segment
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        dist2 = (ys - a[0]) ** 2 + (xs - a[1]) ** 2
    else:
        t = np.clip(((ys - a[0]) * ab[0] + (xs - a[1]) * ab[1]) / denom, 0.0, 1.0)
        dist2 = (ys - (a[0] + t * ab[0])) ** 2 + (xs - (a[1] + t * ab[1])) ** 2
    mask[dist2 <= radius * radius] = 1.0


def apply_mask(image: np.ndarray, mask: np.ndarray, fill: float = DEFAULT_FILL) -> np.ndarray:
    """Incomplete image: known pixels kept, hole pixels set to `fill`."""
    if image.shape[:2] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    m = mask[..., None].astype(image.dtype)
    return (1.0 - m) * image + m * fill


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def synthesize_shapes(n: int, image_size: int, seed: int) -> np.ndarray:
    """Procedural corpus of colored shapes over textured backgrounds.

    Returns (n, image_size, image_size, 3) float32 in [0, 1].
    """
    children = np.random.SeedSequence(seed).spawn(n)
    out = np.empty((n, image_size, image_size, 3), dtype=np.float32)
    for i, child in enumerate(children):
        out[i] = _one_shape_image(image_size, np.random.default_rng(child))
    return out


def _one_shape_image(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = rng.uniform(0.15, 0.85, size=3).astype(np.float32)
    img += _texture_field(yy, xx, rng, freq_range=(2.0, 8.0), amp_range=(0.05, 0.20))[..., None]
    img += _smooth_noise(size, rng)[..., None] * rng.uniform(0.0, 0.10)

    for _ in range(int(rng.integers(2, 6))):
        inside = _shape_region(yy, xx, rng)
        color = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
        grain = _texture_field(yy, xx, rng, freq_range=(8.0, 16.0), amp_range=(0.0, 0.15))
        img[inside] = color + grain[inside, None]
    return np.clip(img, 0.0, 1.0)


def _texture_field(yy, xx, rng, freq_range, amp_range) -> np.ndarray:
    fy, fx = rng.uniform(*freq_range, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(*amp_range)
    return (amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)).astype(np.float32)


def _smooth_noise(size: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.standard_normal((8, 8)).astype(np.float32)
    reps = size // 8
    up = np.kron(coarse, np.ones((reps, reps), dtype=np.float32))
    # cheap smoothing: average with a one-pixel roll in each direction
    return (up + np.roll(up, reps // 2, axis=0) + np.roll(up, reps // 2, axis=1)) / 3.0


def _shape_region(yy, xx, rng) -> np.ndarray:
    kind = rng.choice(["rectangle", "ellipse", "triangle"])
    if kind == "rectangle":
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        hy, hx = rng.uniform(0.08, 0.25, size=2)
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    if kind == "ellipse":
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        ry, rx = rng.uniform(0.08, 0.25, size=2)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    center = rng.uniform(0.2, 0.8, size=2)
    verts = center + rng.uniform(-0.3, 0.3, size=(3, 2))
    return _inside_triangle(yy, xx, verts)


def _inside_triangle(yy, xx, verts) -> np.ndarray:
    def edge_sign(a, b):
        return (b[1] - a[1]) * (yy - a[0]) - (b[0] - a[0]) * (xx - a[1])

    s0 = edge_sign(verts[0], verts[1])
    s1 = edge_sign(verts[1], verts[2])
    s2 = edge_sign(verts[2], verts[0])
    return ((s0 >= 0) & (s1 >= 0) & (s2 >= 0)) | ((s0 <= 0) & (s1 <= 0) & (s2 <= 0))


# ---------------------------------------------------------------------------
# image folders, manifests, splits
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """In-memory corpus with deterministic content-hash splits."""

    images: np.ndarray          # (n, H, W, 3) uint8
    splits: np.ndarray          # (n,) of {"train", "val", "test"}

    def indices(self, split: str) -> np.ndarray:
        return np.nonzero(self.splits == split)[0]

    def batch(self, indices: np.ndarray, flip: np.ndarray | None = None) -> np.ndarray:
        imgs = self.images[indices].astype(np.float32) / 255.0
        if flip is not None:
            for i in np.nonzero(flip)[0]:
                imgs[i] = imgs[i, :, ::-1]
        return imgs

    def __len__(self) -> int:
        return len(self.images)


def content_hash(png_bytes: bytes) -> str:
    return hashlib.sha1(png_bytes).hexdigest()


def split_for_hash(digest: str, train_fraction: float, val_fraction: float) -> str:
    frac = int(digest[:12], 16) / float(16 ** 12)
    if frac < train_fraction:
        return "train"
    if frac < train_fraction + val_fraction:
        return "val"
    return "test"


def write_image_folder(images: np.ndarray, root: str | Path, cfg: DataConfig) -> Path:
    """Write a corpus as PNGs plus a line-delimited manifest (path, split, hash)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, img in enumerate(images):
        arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8) if img.dtype != np.uint8 else img
        rel = f"images/img_{i:06d}.png"
        path = root / rel
        Image.fromarray(arr).save(path, format="PNG")
        digest = content_hash(path.read_bytes())
        split = split_for_hash(digest, cfg.train_fraction, cfg.val_fraction)
        lines.append(f"{rel}\t{split}\t{digest}")
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_image_folder(root: str | Path, image_size: int, crop_policy: str = "resize") -> Dataset:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}; build the dataset first")
    images, splits = [], []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rel, split, _digest = line.split("\t")
        with Image.open(root / rel) as im:
            im = im.convert("RGB")
            if im.size != (image_size, image_size):
                if crop_policy == "random_crop" and min(im.size) > image_size:
                    # deterministic center crop at load; random crops happen per-batch upstream
                    left = (im.width - image_size) // 2
                    top = (im.height - image_size) // 2
                    im = im.crop((left, top, left + image_size, top + image_size))
                else:
                    im = im.resize((image_size, image_size), Image.BILINEAR)
            images.append(np.asarray(im, dtype=np.uint8))
        splits.append(split)
    return Dataset(np.stack(images), np.array(splits))


def build_dataset(cfg: DataConfig, image_size: int, seed: int) -> Dataset:
    """Load the configured corpus, synthesizing the shapes corpus on first use."""
    root = Path(cfg.root)
    if cfg.source == "synthetic_shapes" and not (root / "manifest.txt").exists():
        images = synthesize_shapes(cfg.num_images, image_size, seed)
        write_image_folder(images, root, cfg)
    return load_image_folder(root, image_size, cfg.crop_policy)


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray((mask > 0.5)).save(path, format="PNG", bits=1)


def load_mask_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.float32)


def masks_for_batch(
    kind: str,
    batch: int,
    height: int,
    width: int,
    rng: np.random.Generator,
    cfg: DataConfig | None = None,
) -> np.ndarray:
    """Per-item training masks: center, random, or a coin flip between them."""
    cfg = cfg or DataConfig()
    out = np.empty((batch, height, width), dtype=np.float32)
    for i in range(batch):
        use_center = kind == "center" or (kind == "mixed" and rng.uniform() < 0.5)
        out[i] = make_center_mask(height, width) if use_center else make_random_mask(height, width, rng, cfg)
    return out
