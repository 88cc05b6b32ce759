"""Small image utilities: bilinear resizing and box crops."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .core import Annotation, BBox, LabeledImage, clip_bbox


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an ``H x W x C`` array; dtype is preserved (uint8 is rounded)."""
    if height <= 0 or width <= 0:
        raise ValueError("target size must be positive")
    src = np.asarray(image)
    if src.shape[:2] == (height, width):
        return src.copy()
    t = torch.from_numpy(np.ascontiguousarray(src, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    out = out[0].permute(1, 2, 0).numpy()
    if src.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(src.dtype)


def crop_box(image: np.ndarray, bbox: BBox) -> np.ndarray:
    """Tight crop of ``bbox`` (rounded to pixels, at least 1 px per side)."""
    h_img, w_img = image.shape[:2]
    left, top, right, bottom = bbox.pixel_bounds()
    left, top = min(max(left, 0), w_img - 1), min(max(top, 0), h_img - 1)
    right, bottom = min(max(right, left + 1), w_img), min(max(bottom, top + 1), h_img)
    return image[top:bottom, left:right]


def crop_and_resize(image: np.ndarray, bbox: BBox, size: int | tuple[int, int]) -> np.ndarray:
    if isinstance(size, int):
        size = (size, size)
    return resize_bilinear(crop_box(image, bbox), *size)


def resize_dataset(dataset, size: int):
    """Resize every image to ``size x size`` and rescale its boxes accordingly."""
    items = []
    for item in dataset.items:
        h, w = item.size
        if (h, w) == (size, size):
            items.append(item)
            continue
        sx, sy = size / w, size / h
        anns = tuple(Annotation(a.category_id, clip_bbox(a.bbox.scaled(sx, sy), size, size))
                     for a in item.annotations)
        items.append(LabeledImage(resize_bilinear(item.pixels, size, size), anns, item.name))
    return dataset.with_items(items)
