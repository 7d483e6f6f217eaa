"""Grid types (intensity image, binary mask, rect), the foreground IoU metric,
cropping, and the on-disk PGM / PSM1 formats.

All types are immutable values: operations return new objects and never write
through to an argument's buffer.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

__all__ = [
    "Image",
    "BinaryMask",
    "Rect",
    "iou",
    "mean_iou",
    "crop",
    "crop_mask",
    "read_pgm",
    "write_pgm",
    "read_mask",
    "write_mask",
]


@dataclass(frozen=True)
class Image:
    """Single-channel intensity grid with values in [0, 1], shape (H, W)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2 or a.size == 0:
            raise DimensionError(f"image data must be non-empty 2-D, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("image intensities must be finite")
        if a.min() < 0.0 or a.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel {0,1} labels, shape (H, W), dtype uint8."""

    bits: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.bits)
        if a.ndim != 2 or a.size == 0:
            raise DimensionError(f"mask bits must be non-empty 2-D, got shape {a.shape}")
        if not np.isin(a, (0, 1)).all():
            raise ValueError("mask values must be strictly 0 or 1")
        a = a.astype(np.uint8)
        a.setflags(write=False)
        object.__setattr__(self, "bits", a)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def foreground_count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class Rect:
    """Pixel region: top-left (x0, y0), extent (w, h). Must be non-empty."""

    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DimensionError(f"rect extent must be positive, got {self.w}x{self.h}")
        if self.x0 < 0 or self.y0 < 0:
            raise DimensionError(f"rect origin must be non-negative, got ({self.x0},{self.y0})")

    def check_inside(self, shape: tuple[int, int]) -> None:
        hh, ww = shape
        if self.x0 + self.w > ww or self.y0 + self.h > hh:
            raise DimensionError(
                f"rect ({self.x0},{self.y0},{self.w},{self.h}) exceeds parent {ww}x{hh}"
            )


def iou(pred: BinaryMask, gt: BinaryMask) -> float:
    """Foreground Jaccard index TP/(TP+FN+FP). Both masks empty -> 1.0."""
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.bits.astype(bool)
    g = gt.bits.astype(bool)
    inter = np.count_nonzero(p & g)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return inter / union


def mean_iou(preds: list[BinaryMask], gts: list[BinaryMask]) -> float:
    """Arithmetic mean of per-pair iou over equal-length mask lists."""
    if len(preds) == 0 or len(gts) == 0:
        raise ValueError("mean_iou needs non-empty mask lists")
    if len(preds) != len(gts):
        raise ValueError(f"list lengths differ: {len(preds)} vs {len(gts)}")
    return float(np.mean([iou(p, g) for p, g in zip(preds, gts)]))


def crop(img: Image, r: Rect) -> Image:
    """Copy of the w x h sub-grid of img at rect r."""
    r.check_inside(img.shape)
    return Image(img.data[r.y0 : r.y0 + r.h, r.x0 : r.x0 + r.w].copy())


def crop_mask(mask: BinaryMask, r: Rect) -> BinaryMask:
    """Mask analogue of crop."""
    r.check_inside(mask.shape)
    return BinaryMask(mask.bits[r.y0 : r.y0 + r.h, r.x0 : r.x0 + r.w].copy())


# ---------------------------------------------------------------------------
# File formats: binary PGM (P5, maxval 255) for images; PSM1 for masks.
# PSM1 layout: 16-byte header = magic "PSM1", width and height as little-endian
# uint32, 4 reserved zero bytes; then one byte per pixel, row-major.
# ---------------------------------------------------------------------------

_PSM_MAGIC = b"PSM1"


def write_pgm(img: Image, path) -> None:
    q = np.round(img.data * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path) -> Image:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comment lines allowed.
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return Image(data.reshape(h, w).astype(np.float64) / 255.0)


def write_mask(mask: BinaryMask, path) -> None:
    with open(path, "wb") as f:
        f.write(_PSM_MAGIC)
        f.write(struct.pack("<II", mask.width, mask.height))
        f.write(b"\x00" * 4)
        f.write(mask.bits.tobytes())


def read_mask(path) -> BinaryMask:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != _PSM_MAGIC:
            raise ValueError(f"{path}: not a PSM1 mask file")
        w, h = struct.unpack("<II", header[4:12])
        payload = f.read(w * h)
    if len(payload) != w * h:
        raise ValueError(f"{path}: truncated mask payload")
    bits = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return BinaryMask(bits)
