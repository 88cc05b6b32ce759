"""Box rasterization: per-class count masks and binary foreground masks."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..core import Annotation


def boxes_to_mask(annotations: Sequence[Annotation], height: int, width: int, num_categories: int) -> np.ndarray:
    """``H x W x K`` mask where entry ``[i, j, k]`` counts the class-k boxes covering pixel (i, j).

    Box edges are rounded to integer pixels and treated as half-open ranges.
    This is the box condition for a plain ControlNet baseline.
    """
    mask = np.zeros((height, width, num_categories), dtype=np.int32)
    for ann in annotations:
        left, top, right, bottom = ann.bbox.pixel_bounds()
        mask[max(top, 0):max(bottom, 0), max(left, 0):max(right, 0), ann.category_id] += 1
    return mask


def rasterize_foreground_mask(annotations: Sequence[Annotation], height: int, width: int,
                              image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Binary ``height x width`` mask, 1 on pixels covered by any box.

    Boxes are scaled from ``image_size`` (defaults to the mask size) and
    rounded outward, so partially covered pixels count as foreground.
    """
    img_h, img_w = image_size or (height, width)
    sy, sx = height / img_h, width / img_w
    mask = np.zeros((height, width), dtype=np.float32)
    for ann in annotations:
        b = ann.bbox
        # round() guards against 63.00000000001 -> 64 style float noise
        left = math.floor(round(b.x * sx, 9))
        top = math.floor(round(b.y * sy, 9))
        right = math.ceil(round(b.x2 * sx, 9))
        bottom = math.ceil(round(b.y2 * sy, 9))
        mask[max(top, 0):min(bottom, height), max(left, 0):min(right, width)] = 1.0
    return mask
