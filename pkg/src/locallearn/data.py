"""Synthetic digit-on-background scenes and an IDX (MNIST format) reader."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# 5x7 bitmap glyphs, rows top to bottom
_GLYPH_ROWS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}
GLYPHS = np.array([[[c == "1" for c in row] for row in _GLYPH_ROWS[d]] for d in range(10)])
GLYPH_H, GLYPH_W = GLYPHS.shape[1:]

BG_MAX = 0.6


@dataclass
class DigitSceneDataset:
    images: np.ndarray          # (N, C, H, W) in [0, 1]
    y1: np.ndarray              # background id
    y2: np.ndarray              # digit
    y3: np.ndarray              # position id
    seeds: np.ndarray           # per-example render seed
    n_backgrounds: int
    n_positions: int
    seed: int
    channels: int = 3
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def labels(self, which: str) -> np.ndarray:
        return {"y1": self.y1, "y2": self.y2, "y3": self.y3}[which]

    def n_classes(self, which: str) -> int:
        return {"y1": self.n_backgrounds, "y2": 10, "y3": self.n_positions}[which]

    def subset(self, idx) -> "DigitSceneDataset":
        return DigitSceneDataset(self.images[idx], self.y1[idx], self.y2[idx], self.y3[idx], self.seeds[idx],
                                 self.n_backgrounds, self.n_positions, self.seed, self.channels, dict(self.meta))


def position_grid(image_size: int, n_positions: int) -> list[tuple[int, int]]:
    """Top-left corners of ``n_positions`` distinct glyph placements, row-major on a grid."""
    if GLYPH_H > image_size or GLYPH_W > image_size:
        raise ValueError(f"a {GLYPH_W}x{GLYPH_H} glyph does not fit a {image_size}x{image_size} image")
    span_y, span_x = image_size - GLYPH_H, image_size - GLYPH_W
    gx = math.ceil(math.sqrt(n_positions))
    gy = math.ceil(n_positions / gx)
    if gx > span_x + 1 or gy > span_y + 1:
        raise ValueError(f"{n_positions} distinct glyph positions do not fit a {image_size}x{image_size} image")
    xs = np.round(np.linspace(0, span_x, gx)).astype(int) if gx > 1 else np.array([span_x // 2])
    ys = np.round(np.linspace(0, span_y, gy)).astype(int) if gy > 1 else np.array([span_y // 2])
    grid = [(int(r), int(c)) for r in ys for c in xs]
    return grid[:n_positions]


def _background_styles(n_backgrounds: int, seed: int) -> list[dict]:
    """Per-class texture: grating orientation and spatial frequency (colours are drawn per image)."""
    rng = np.random.default_rng([seed, 0xB6])
    angles = (np.arange(n_backgrounds) * math.pi / n_backgrounds + rng.uniform(0, math.pi)) % math.pi
    freqs = rng.permutation(np.linspace(0.5, 1.5, n_backgrounds))
    return [{"angle": float(a), "freq": float(f)} for a, f in zip(angles, freqs)]


@dataclass(frozen=True)
class SceneStyle:
    """Difficulty knobs of the renderer."""
    noise: float = 0.1               # uniform pixel noise amplitude on the background
    contrast: tuple = (0.15, 0.4)    # glyph ink above the brightest background pixel under it
    stroke_dropout: float = 0.1      # probability of dropping each glyph pixel


def render_scene(y1: int, y2: int, y3: int, example_seed: int, image_size: int, styles, grid,
                 channels: int = 3, style: SceneStyle = SceneStyle()) -> np.ndarray:
    """Image for labels (background y1, digit y2, position y3) and a per-example seed."""
    rng = np.random.default_rng(example_seed)
    st = styles[y1]
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    phase = rng.uniform(0, 2 * math.pi)
    u = xx * math.cos(st["angle"]) + yy * math.sin(st["angle"])
    mix = 0.5 + 0.5 * np.sin(st["freq"] * u + phase)
    c0, c1 = rng.uniform(0.0, BG_MAX, (2, channels, 1, 1))
    img = c0 * (1 - mix) + c1 * mix
    img = img + rng.uniform(-style.noise, style.noise, size=img.shape)
    img = np.clip(img, 0.0, BG_MAX)
    r, c = grid[y3]
    patch = img[:, r:r + GLYPH_H, c:c + GLYPH_W]
    # ink is strictly brighter than every background pixel under the glyph box
    ink = patch.max() + rng.uniform(*style.contrast, size=(channels, 1, 1))
    keep = GLYPHS[y2] & (rng.random((GLYPH_H, GLYPH_W)) >= style.stroke_dropout)
    img[:, r:r + GLYPH_H, c:c + GLYPH_W] = np.where(keep, np.minimum(ink, 1.0), patch)
    return img


def generate_digit_scenes(n: int, image_size: int = 16, n_backgrounds: int = 10, n_positions: int = 16,
                          seed: int = 0, channels: int = 3, style: SceneStyle = SceneStyle()) -> DigitSceneDataset:
    """Deterministic dataset of digits placed on procedural textured backgrounds.

    Labels are drawn i.i.d. uniform; each image is a pure function of its
    labels, the per-example seed and the dataset-level texture styles.
    """
    if n_backgrounds < 1 or n_positions < 1:
        raise ValueError("need at least one background and one position")
    grid = position_grid(image_size, n_positions)
    styles = _background_styles(n_backgrounds, seed)
    rng = np.random.default_rng([seed, 0x1A])
    y1 = rng.integers(0, n_backgrounds, n)
    y2 = rng.integers(0, 10, n)
    y3 = rng.integers(0, n_positions, n)
    seeds = rng.integers(0, 2**62, n)
    images = np.empty((n, channels, image_size, image_size))
    for i in range(n):
        images[i] = render_scene(y1[i], y2[i], y3[i], int(seeds[i]), image_size, styles, grid, channels, style)
    meta = {"image_size": image_size, "grid": grid}
    return DigitSceneDataset(images, y1, y2, y3, seeds, n_backgrounds, n_positions, seed, channels, meta)


# ----------------------------------------------------------------- IDX

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXError(ValueError):
    pass


def _read_idx(path, magic: int, ndim: int, kind: str):
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise IDXError(f"{path}: truncated header ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IDXError(f"{path}: bad magic 0x{got:08X} for {kind} file (expected 0x{magic:08X})")
    if len(raw) < header:
        raise IDXError(f"{path}: truncated header ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    body = raw[header:]
    if len(body) < need:
        raise IDXError(f"{path}: truncated data, expected {need} bytes, found {len(body)}")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label file pair; images come back as float64 in [0, 1]."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3, "image")
    labels = _read_idx(labels_path, LABEL_MAGIC, 1, "label")
    if len(images) != len(labels):
        raise IDXError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())
