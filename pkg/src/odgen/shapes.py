"""Procedural toy detection corpus: colored solid shapes on a textured gray board."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .core import Annotation, BBox, DetectionDataset, LabeledImage, clip_bbox
from .validation import check_rng
from .yolo import export_yolo_dataset

CATEGORIES = ("circle", "square", "triangle")
SCENE_NAME = "gray board"
BASE_COLORS = {"circle": (220, 40, 40), "square": (40, 190, 60), "triangle": (50, 80, 230)}


def textured_background(size: int, rng) -> np.ndarray:
    """Low-saturation gray with a linear gradient and per-pixel grain."""
    rng = check_rng(rng)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    gx, gy = rng.uniform(-30, 30, size=2)
    base = rng.uniform(100, 150) + gx * (xx - 0.5) + gy * (yy - 0.5)
    grain = rng.normal(0, 7, size=(size, size))
    gray = base + grain
    tint = rng.uniform(-6, 6, size=3)
    img = gray[..., None] + tint + rng.normal(0, 2, size=(size, size, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, x0: float, y0: float, w: float, h: float, color):
    x1, y1 = x0 + w - 1, y0 + h - 1
    if kind == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=color)
    elif kind == "square":
        draw.rectangle([x0, y0, x1, y1], fill=color)
    elif kind == "triangle":
        draw.polygon([(x0 + (w - 1) / 2, y0), (x1, y1), (x0, y1)], fill=color)
    else:
        raise ValueError(f"unknown shape {kind!r}")


def render_shapes_image(size: int, objects, rng) -> tuple[np.ndarray, list[Annotation]]:
    """Render ``objects`` = [(category_id, x, y, w, h), ...] (integer pixels) in order."""
    rng = check_rng(rng)
    img = Image.fromarray(textured_background(size, rng))
    draw = ImageDraw.Draw(img)
    anns = []
    for cat, x, y, w, h in objects:
        kind = CATEGORIES[cat]
        jitter = rng.integers(-25, 26, size=3)
        color = tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(BASE_COLORS[kind], jitter))
        _draw_shape(draw, kind, x, y, w, h, color)
        anns.append(Annotation(cat, clip_bbox(BBox(x, y, w, h), size, size)))
    return np.asarray(img, dtype=np.uint8), anns


def random_layout(size: int, rng, max_objects: int = 3, min_side: int = 12, max_side: int = 26):
    rng = check_rng(rng)
    n = int(rng.integers(1, max_objects + 1))
    objects = []
    for _ in range(n):
        cat = int(rng.integers(len(CATEGORIES)))
        w = int(rng.integers(min_side, max_side + 1))
        h = w if CATEGORIES[cat] != "triangle" else int(rng.integers(min_side, max_side + 1))
        if CATEGORIES[cat] == "circle":
            h = int(np.clip(w + rng.integers(-3, 4), min_side, max_side))
        x = int(rng.integers(0, size - w + 1))
        y = int(rng.integers(0, size - h + 1))
        objects.append((cat, x, y, w, h))
    return objects


def make_shapes_dataset(n_images: int = 200, size: int = 64, rng=None, split: str = "train",
                        max_objects: int = 3) -> DetectionDataset:
    rng = check_rng(rng)
    items = []
    for i in range(n_images):
        pixels, anns = render_shapes_image(size, random_layout(size, rng, max_objects), rng)
        items.append(LabeledImage(pixels, tuple(anns), name=f"{split}_{i:05d}"))
    return DetectionDataset(CATEGORIES, SCENE_NAME, split, tuple(items))


def make_shapes_corpus(root, n_train: int = 200, n_val: int = 40, n_test: int = 40, size: int = 64,
                       seed: int = 0, max_objects: int = 3) -> Path:
    """Write a train/val/test shapes corpus in YOLO layout under ``root``."""
    seq = np.random.SeedSequence(seed)
    for split, n, child in zip(("train", "val", "test"), (n_train, n_val, n_test), seq.spawn(3)):
        ds = make_shapes_dataset(n, size, np.random.default_rng(child), split, max_objects)
        export_yolo_dataset(ds, root)
    return Path(root)


def solid_shape_patch(kind: str, size: int = 64, rng=None) -> np.ndarray:
    """A patch filled by one shape (a tight crop of a rendered object)."""
    rng = check_rng(rng)
    cat = CATEGORIES.index(kind)
    pixels, _ = render_shapes_image(size, [(cat, 0, 0, size, size)], rng)
    return pixels
