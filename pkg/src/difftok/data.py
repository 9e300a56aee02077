"""Corpus loading, augmentation, and synthetic structured corpora.

Images are float32 tensors of shape (3, R, R) in [-1, 1]. The synthetic
corpora stress regular visual structure: glyph strings from an embedded 5x7
bitmap font, checkerboards, colored shape primitives with class labels, and
smooth color gradients.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, ShapeError

SYNTH_KINDS = ("glyphs", "checkerboard", "shapes", "gradients")

# 5x7 bitmap font, one glyph per character, rows top to bottom, 5-bit masks.
_FONT_5X7 = {
    "A": (0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "B": (0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E),
    "C": (0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E),
    "D": (0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C),
    "E": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F),
    "F": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10),
    "G": (0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F),
    "H": (0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "I": (0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "J": (0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C),
    "K": (0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11),
    "L": (0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F),
    "M": (0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11),
    "N": (0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11),
    "O": (0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "P": (0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10),
    "Q": (0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D),
    "R": (0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11),
    "S": (0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E),
    "T": (0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04),
    "U": (0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "V": (0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04),
    "W": (0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11),
    "X": (0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11),
    "Y": (0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04),
    "Z": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F),
    "0": (0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E),
    "1": (0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "2": (0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F),
    "3": (0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E),
    "4": (0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02),
    "5": (0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E),
    "6": (0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E),
    "7": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08),
    "8": (0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E),
    "9": (0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C),
}
_FONT_CHARS = sorted(_FONT_5X7)

# (shape, RGB in [-1, 1]) per class; class 0 red square, class 1 blue circle.
_SHAPE_CLASSES = [
    ("square", (0.9, -0.9, -0.9)),
    ("circle", (-0.9, -0.9, 0.9)),
    ("triangle", (-0.9, 0.9, -0.9)),
    ("square", (0.9, 0.9, -0.9)),
    ("circle", (0.9, -0.9, 0.9)),
    ("triangle", (-0.9, 0.9, 0.9)),
]
_SHAPES_BACKGROUND = 0.85


@dataclass
class ImageDataset:
    """In-memory image corpus: images (N, 3, R, R) in [-1, 1] plus labels."""

    images: torch.Tensor
    labels: torch.Tensor
    ids: list[str]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeError(f"expected images of shape (N, 3, H, W), got {tuple(self.images.shape)}")
        if len(self.labels) != len(self.images) or len(self.ids) != len(self.images):
            raise ShapeError("images, labels, and ids must have equal length")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def resolution(self) -> int:
        return int(self.images.shape[-1])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max().item()) + 1 if len(self) else 0

    def subset(self, indices) -> "ImageDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ImageDataset(self.images[idx], self.labels[idx], [self.ids[i] for i in idx.tolist()])


def _resize_shorter_side(img: Image.Image, resolution: int) -> Image.Image:
    w, h = img.size
    scale = resolution / min(w, h)
    new_w = max(resolution, int(round(w * scale)))
    new_h = max(resolution, int(round(h * scale)))
    return img.resize((new_w, new_h), Image.BILINEAR)


def _to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_folder(path, resolution: int, split: str = "eval", seed: int = 0) -> ImageDataset:
    """Load every decodable PNG/JPEG in a folder, in lexicographic order.

    The train split resizes the shorter side to ``resolution`` then takes a
    random crop (seeded per item); the eval split center-crops, so it is
    fully deterministic.
    """
    if split not in ("train", "eval"):
        raise ConfigurationError(f"split must be 'train' or 'eval', got {split!r}")
    folder = Path(path)
    files = sorted(
        p for p in folder.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    ) if folder.is_dir() else []
    if not files:
        raise ConfigurationError(f"no PNG/JPEG images found in {folder}")
    images, ids = [], []
    for i, file in enumerate(files):
        try:
            with Image.open(file) as img:
                img = _resize_shorter_side(img, resolution)
                w, h = img.size
                if split == "train":
                    g = torch.Generator().manual_seed(seed * 1_000_003 + i)
                    left = int(torch.randint(0, w - resolution + 1, (1,), generator=g))
                    top = int(torch.randint(0, h - resolution + 1, (1,), generator=g))
                else:
                    left, top = (w - resolution) // 2, (h - resolution) // 2
                img = img.crop((left, top, left + resolution, top + resolution))
                images.append(_to_tensor(img))
                ids.append(file.name)
        except (UnidentifiedImageError, OSError) as exc:
            warnings.warn(f"skipping undecodable image {file}: {exc}")
    if not images:
        raise ConfigurationError(f"all {len(files)} images in {folder} were undecodable")
    stack = torch.stack(images)
    return ImageDataset(stack, torch.zeros(len(images), dtype=torch.long), ids)


def augment(image: torch.Tensor, rng: torch.Generator, resolution: int | None = None) -> torch.Tensor:
    """Random crop to the target resolution, then horizontal flip with p = 0.5."""
    resolution = resolution or min(image.shape[-2:])
    h, w = image.shape[-2:]
    if h < resolution or w < resolution:
        raise ShapeError(f"image {h}x{w} smaller than crop {resolution}")
    top = int(torch.randint(0, h - resolution + 1, (1,), generator=rng))
    left = int(torch.randint(0, w - resolution + 1, (1,), generator=rng))
    out = image[..., top : top + resolution, left : left + resolution]
    if float(torch.rand((), generator=rng)) < 0.5:
        out = out.flip(-1)
    return out


def _grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    coords = np.arange(resolution, dtype=np.float32) + 0.5
    return np.meshgrid(coords, coords, indexing="ij")


def _paint(canvas: np.ndarray, mask: np.ndarray, color) -> None:
    for c in range(3):
        canvas[c] = canvas[c] * (1 - mask) + color[c] * mask


def _shape_mask(kind: str, yy, xx, cy, cx, radius) -> np.ndarray:
    if kind == "square":
        dist = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
    elif kind == "circle":
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    else:  # triangle: downward distance field of an upright triangle
        dy = (yy - cy) / radius
        dx = np.abs(xx - cx) / radius
        inside = np.maximum(dy + 2 * dx - 1.0, -1.0 - dy) * radius / 2 + radius
        dist = inside
    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def _render_shape(resolution: int, class_id: int, rng: np.random.Generator) -> np.ndarray:
    kind, color = _SHAPE_CLASSES[class_id % len(_SHAPE_CLASSES)]
    yy, xx = _grid(resolution)
    canvas = np.full((3, resolution, resolution), _SHAPES_BACKGROUND, dtype=np.float32)
    radius = rng.uniform(resolution / 5.0, resolution / 3.2)
    cy = rng.uniform(radius + 1, resolution - radius - 1)
    cx = rng.uniform(radius + 1, resolution - radius - 1)
    _paint(canvas, _shape_mask(kind, yy, xx, cy, cx, radius), color)
    return canvas


def _render_checkerboard(resolution: int, rng: np.random.Generator, cell_size: int | None = None) -> np.ndarray:
    cell = cell_size or int(rng.choice([2, 4, 8]))
    idx = np.arange(resolution) // cell
    board = ((idx[:, None] + idx[None, :]) % 2).astype(np.float32)
    color_a = rng.uniform(-1.0, 1.0, size=3).astype(np.float32)
    color_b = -color_a
    canvas = np.empty((3, resolution, resolution), dtype=np.float32)
    for c in range(3):
        canvas[c] = color_a[c] * (1 - board) + color_b[c] * board
    return canvas


def _render_gradient(resolution: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(resolution)
    theta = rng.uniform(0, 2 * math.pi)
    proj = (math.cos(theta) * xx + math.sin(theta) * yy) / resolution
    proj = (proj - proj.min()) / (proj.max() - proj.min())
    c0 = rng.uniform(-1.0, 1.0, size=3).astype(np.float32)
    c1 = rng.uniform(-1.0, 1.0, size=3).astype(np.float32)
    return np.stack([c0[c] * (1 - proj) + c1[c] * proj for c in range(3)]).astype(np.float32)


def _render_glyphs(resolution: int, rng: np.random.Generator) -> np.ndarray:
    canvas = np.full((3, resolution, resolution), 0.9, dtype=np.float32)
    n_chars = int(rng.integers(2, 5))
    text = "".join(rng.choice(_FONT_CHARS) for _ in range(n_chars))
    scale = max(1, resolution // ((n_chars * 6 + 1)))
    width = (6 * n_chars - 1) * scale
    height = 7 * scale
    top = int(rng.integers(1, max(2, resolution - height - 1)))
    left = int(rng.integers(1, max(2, resolution - width - 1)))
    ink = rng.uniform(-1.0, -0.5, size=3).astype(np.float32)
    for k, ch in enumerate(text):
        rows = _FONT_5X7[ch]
        x0 = left + k * 6 * scale
        for r, row_bits in enumerate(rows):
            for c in range(5):
                if row_bits >> (4 - c) & 1:
                    y, x = top + r * scale, x0 + c * scale
                    for ch3 in range(3):
                        canvas[ch3, y : y + scale, x : x + scale] = ink[ch3]
    return canvas


def synth_corpus(
    kind: str,
    n: int,
    resolution: int = 32,
    seed: int = 0,
    num_classes: int = 2,
    cell_size: int | None = None,
) -> ImageDataset:
    """Deterministically generate a labeled synthetic corpus.

    Shapes carry class labels cycling over (shape, color) pairs; the other
    kinds are single-class.
    """
    if kind not in SYNTH_KINDS:
        raise ConfigurationError(f"unknown corpus kind {kind!r}; expected one of {SYNTH_KINDS}")
    if n <= 0:
        raise ConfigurationError(f"corpus size must be positive, got {n}")
    if resolution < 16:
        raise ConfigurationError(f"resolution must be >= 16, got {resolution}")
    if kind == "shapes" and not 1 <= num_classes <= len(_SHAPE_CLASSES):
        raise ConfigurationError(f"shapes supports 1..{len(_SHAPE_CLASSES)} classes, got {num_classes}")
    images = np.empty((n, 3, resolution, resolution), dtype=np.float32)
    labels = torch.zeros(n, dtype=torch.long)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        if kind == "shapes":
            label = int(rng.integers(0, num_classes))
            images[i] = _render_shape(resolution, label, rng)
            labels[i] = label
        elif kind == "checkerboard":
            images[i] = _render_checkerboard(resolution, rng, cell_size)
        elif kind == "gradients":
            images[i] = _render_gradient(resolution, rng)
        else:
            images[i] = _render_glyphs(resolution, rng)
    ids = [f"{kind}-{seed}-{i:05d}" for i in range(n)]
    return ImageDataset(torch.from_numpy(images), labels, ids)


def export_png_folder(dataset: ImageDataset, folder) -> None:
    """Write a corpus out as 8-bit PNGs for inspection."""
    from .reporting import to_png

    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        to_png(dataset.images[i], folder / f"{dataset.ids[i]}.png")
