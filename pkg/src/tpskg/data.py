"""Synthetic fine-grained dataset and training-time augmentation.

Every image is a smooth random background (same distribution for all
classes) plus two copies of its class glyph at independent, non-overlapping
positions, plus pixel noise. Glyphs share a common base pattern and differ
only in a class-specific component, so the discriminative evidence is small
and local, and hiding one copy still leaves the other.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class DataSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    classes: int = 8
    train_per_class: int = 64
    test_per_class: int = 32
    canvas_h: int = 32
    canvas_w: int = 32
    channels: int = 1
    glyph: int = 8
    jitter: int = 1
    noise_std: float = 0.1
    background_std: float = 0.5
    glyph_block: int = 2
    mirror_glyphs: bool = True
    seed: int = 0

    def __post_init__(self):
        for key in ("classes", "canvas_h", "canvas_w", "channels", "glyph"):
            if getattr(self, key) < 1:
                raise DataSpecError(f"{key} must be positive, got {getattr(self, key)}")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise DataSpecError("per-class counts must be nonnegative")
        if self.jitter < 0 or self.noise_std < 0 or self.background_std < 0:
            raise DataSpecError("jitter, noise_std and background_std must be nonnegative")
        if self.canvas_h % self.glyph or self.canvas_w % self.glyph:
            raise DataSpecError(f"canvas {self.canvas_h}x{self.canvas_w} is not a multiple of glyph {self.glyph}")
        if self.glyph_block < 1 or self.glyph % self.glyph_block:
            raise DataSpecError(f"glyph_block {self.glyph_block} must divide glyph {self.glyph}")
        if self.cells < 2:
            raise DataSpecError("canvas must hold at least two glyph cells")

    @property
    def cells(self) -> int:
        return (self.canvas_h // self.glyph) * (self.canvas_w // self.glyph)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticDataset:
    images: np.ndarray       # (n, H, W, C) float32
    labels: np.ndarray       # (n,) int64
    positions: np.ndarray | None = None    # (n, 2, 2) top-left (row, col) of both glyph copies
    backgrounds: np.ndarray | None = None  # (n, H, W, C) before glyphs and noise; not persisted

    def __len__(self) -> int:
        return len(self.labels)


def make_glyphs(spec: SyntheticDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """(G, P, P, C) glyphs: shared +/-0.5 base plus a class-specific +/-0.5 part.

    Patterns are drawn on a coarse grid of ``glyph_block``-pixel cells and,
    with ``mirror_glyphs``, made left-right symmetric so a horizontal flip
    maps every glyph onto itself.
    """
    p, c, blk = spec.glyph, spec.channels, spec.glyph_block
    coarse = p // blk
    base = rng.choice([-0.5, 0.5], size=(coarse, coarse, c))
    own = rng.choice([-0.5, 0.5], size=(spec.classes, coarse, coarse, c))
    glyphs = base[None] + own
    if spec.mirror_glyphs:
        half = (coarse + 1) // 2
        glyphs[:, :, coarse - half:] = glyphs[:, :, :half][:, :, ::-1]
    glyphs = glyphs.repeat(blk, axis=1).repeat(blk, axis=2)
    return glyphs.astype(np.float32)


def _background(spec: SyntheticDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.canvas_h, spec.canvas_w
    rows = np.arange(h)[:, None] / h
    cols = np.arange(w)[None, :] / w
    out = np.zeros((h, w, spec.channels))
    for ch in range(spec.channels):
        field = np.zeros((h, w))
        for _ in range(3):
            fy, fx = rng.integers(0, 3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field += np.cos(2 * np.pi * (fy * rows + fx * cols) + phase)
        out[..., ch] = field / np.sqrt(1.5)
    return (spec.background_std * out).astype(np.float32)


def _overlap(a, b, size: int) -> bool:
    return abs(a[0] - b[0]) < size and abs(a[1] - b[1]) < size


def _place(spec: SyntheticDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """Two non-overlapping top-left corners: distinct grid cells plus jitter, clamped."""
    p = spec.glyph
    gw = spec.canvas_w // p
    while True:
        cells = rng.choice(spec.cells, size=2, replace=False)
        pos = []
        for cell in cells:
            r, c = divmod(int(cell), gw)
            dr, dc = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
            pos.append((int(np.clip(r * p + dr, 0, spec.canvas_h - p)),
                        int(np.clip(c * p + dc, 0, spec.canvas_w - p))))
        if not _overlap(pos[0], pos[1], p):
            return np.array(pos, dtype=np.int64)


def _split(spec: SyntheticDatasetSpec, glyphs: np.ndarray, per_class: int,
           rng: np.random.Generator) -> SyntheticDataset:
    n = per_class * spec.classes
    labels = rng.permutation(np.repeat(np.arange(spec.classes), per_class)).astype(np.int64)
    shape = (spec.canvas_h, spec.canvas_w, spec.channels)
    images = np.empty((n,) + shape, dtype=np.float32)
    backgrounds = np.empty_like(images)
    positions = np.empty((n, 2, 2), dtype=np.int64)
    p = spec.glyph
    for i, g in enumerate(labels):
        bg = _background(spec, rng)
        pos = _place(spec, rng)
        img = bg.copy()
        for r, c in pos:
            img[r:r + p, c:c + p] += glyphs[g]
        if spec.noise_std > 0:
            img += rng.normal(0.0, spec.noise_std, size=shape).astype(np.float32)
        images[i], backgrounds[i], positions[i] = img, bg, pos
    return SyntheticDataset(images, labels, positions, backgrounds)


def generate_dataset(spec: SyntheticDatasetSpec, seed: int | None = None):
    """Deterministic (train, test, glyphs) for ``seed`` (defaults to ``spec.seed``)."""
    seed = spec.seed if seed is None else seed
    glyph_ss, train_ss, test_ss = np.random.SeedSequence(seed).spawn(3)
    glyphs = make_glyphs(spec, np.random.default_rng(glyph_ss))
    train = _split(spec, glyphs, spec.train_per_class, np.random.default_rng(train_ss))
    test = _split(spec, glyphs, spec.test_per_class, np.random.default_rng(test_ss))
    return train, test, glyphs


# -------------------------------------------------------------- augmentation


def crop(image: np.ndarray, pad: int, top: int, left: int) -> np.ndarray:
    """Zero-pad by ``pad`` on each side, then crop back to the original size at (top, left)."""
    if pad == 0:
        return image.copy()
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    return padded[top:top + h, left:left + w].copy()


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def center_crop(image: np.ndarray, pad: int) -> np.ndarray:
    return crop(image, pad, pad, pad)


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 1, flip: bool | None = None) -> np.ndarray:
    """Random pad-and-crop, then horizontal flip with probability 0.5 (or forced via ``flip``)."""
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    coin = rng.random() < 0.5
    out = crop(image, pad, int(top), int(left))
    if coin if flip is None else flip:
        out = hflip(out)
    return out


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 1) -> np.ndarray:
    return np.stack([augment(img, rng, pad) for img in images])
