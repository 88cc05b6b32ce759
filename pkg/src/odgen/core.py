"""Data model: boxes, annotations, labeled images and detection datasets.

Boxes are stored as top-left corner plus size, in pixels. The YOLO center
format only exists at the I/O boundary (see :mod:`odgen.yolo`).

Aspect ratio is defined everywhere as ``w / h``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import EmptyBox

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"BBox.{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.w <= 0 or self.h <= 0:
            raise EmptyBox(f"box has non-positive size w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def scaled(self, sx: float, sy: float) -> "BBox":
        return BBox(self.x * sx, self.y * sy, self.w * sx, self.h * sy)

    def pixel_bounds(self) -> tuple[int, int, int, int]:
        """Integer ``(left, top, right, bottom)`` by rounding, half-open."""
        return (int(round(self.x)), int(round(self.y)),
                int(round(self.x2)), int(round(self.y2)))


@dataclass(frozen=True)
class Annotation:
    category_id: int
    bbox: BBox

    def __post_init__(self):
        object.__setattr__(self, "category_id", int(self.category_id))
        if self.category_id < 0:
            raise ValueError(f"negative category id {self.category_id}")


def _frozen_pixels(pixels) -> np.ndarray:
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"pixels must be H x W x 3, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) or arr.min() < 0 or arr.max() > 255:
            raise ValueError("pixels must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    annotations: tuple[Annotation, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen_pixels(self.pixels))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        h, w = self.size
        for ann in self.annotations:
            b = ann.bbox
            if b.x < -1e-6 or b.y < -1e-6 or b.x2 > w + 1e-6 or b.y2 > h + 1e-6:
                raise ValueError(f"annotation {b} lies outside the {w}x{h} image")

    @property
    def size(self) -> tuple[int, int]:
        """``(H, W)``."""
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class DetectionDataset:
    categories: tuple[str, ...]
    scene_name: str
    split: str = "train"
    items: tuple[LabeledImage, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "items", tuple(self.items))
        if not self.categories:
            raise ValueError("a dataset needs at least one category")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError(f"category names must be unique: {self.categories}")
        if not self.scene_name:
            raise ValueError("scene_name must be non-empty")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        k = len(self.categories)
        for item in self.items:
            for ann in item.annotations:
                if ann.category_id >= k:
                    raise ValueError(f"category id {ann.category_id} out of range for K={k}")

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    def __len__(self) -> int:
        return len(self.items)

    def max_objects(self) -> int:
        """Maximum number of annotations in a single image (0 if empty)."""
        return max((len(item.annotations) for item in self.items), default=0)

    def count_matrix(self) -> np.ndarray:
        """Per-image object counts, shape ``(n_images, K)``."""
        counts = np.zeros((len(self.items), self.num_categories), dtype=np.int64)
        for i, item in enumerate(self.items):
            for ann in item.annotations:
                counts[i, ann.category_id] += 1
        return counts

    def with_items(self, items: Sequence[LabeledImage], split: str | None = None) -> "DetectionDataset":
        return DetectionDataset(self.categories, self.scene_name, split or self.split, tuple(items))


def clip_bbox(bbox: BBox, width: float, height: float) -> BBox:
    """Intersect ``bbox`` with the ``width`` x ``height`` image rectangle.

    Raises EmptyBox when the intersection has zero area.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    x1 = min(max(bbox.x, 0.0), width)
    y1 = min(max(bbox.y, 0.0), height)
    x2 = min(max(bbox.x2, 0.0), width)
    y2 = min(max(bbox.y2, 0.0), height)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise EmptyBox(f"{bbox} does not intersect the {width}x{height} image")
    if (x1, y1, x2, y2) == (bbox.x, bbox.y, bbox.x2, bbox.y2):
        return bbox
    return BBox(x1, y1, x2 - x1, y2 - y1)


def derive_geometry(bbox: BBox) -> tuple[float, float]:
    """Return ``(area, ratio)`` with ratio = w / h."""
    return bbox.w * bbox.h, bbox.w / bbox.h


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)
