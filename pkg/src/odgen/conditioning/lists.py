"""Object-wise conditions: text lists, image lists and global prompts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import Annotation, BBox
from ..exceptions import EmptyBox, Overflow, ShapeMismatch
from ..imaging import resize_bilinear
from ..stats import PseudoLabel
from ..validation import check_rng
from .pool import ForegroundPool

OBJECT_TEMPLATE = "a {}"


@dataclass(frozen=True)
class TextList:
    entries: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen_pad = False
        for e in self.entries:
            if e == "":
                seen_pad = True
            elif seen_pad:
                raise ValueError("non-empty entries must precede padding")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_objects(self) -> int:
        return sum(1 for e in self.entries if e)


@dataclass(frozen=True)
class ImageList:
    canvases: np.ndarray  # (N, H, W, 3) float32

    def __post_init__(self):
        arr = np.asarray(self.canvases, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ShapeMismatch(f"canvases must be (N, H, W, 3), got {arr.shape}")
        object.__setattr__(self, "canvases", arr)

    def __len__(self) -> int:
        return self.canvases.shape[0]

    def channel_stack(self) -> np.ndarray:
        """Canvases concatenated channel-wise: ``(3N, H, W)``, canvas i at channels 3i..3i+2."""
        n, h, w, _ = self.canvases.shape
        return self.canvases.transpose(0, 3, 1, 2).reshape(3 * n, h, w)


@dataclass(frozen=True)
class ConditionTriplet:
    image_list: ImageList
    text_list: TextList
    global_prompt: str

    def __post_init__(self):
        if len(self.image_list) != len(self.text_list):
            raise ShapeMismatch("image list and text list must have the same length")
        if not self.global_prompt:
            raise ValueError("global prompt must be non-empty")


def object_prompt(name: str) -> str:
    return OBJECT_TEMPLATE.format(name)


def scene_prompt(scene_name: str) -> str:
    return OBJECT_TEMPLATE.format(scene_name)


def build_text_list(pseudo: PseudoLabel | Sequence[Annotation], categories: Sequence[str], n: int) -> TextList:
    anns = pseudo.annotations if isinstance(pseudo, PseudoLabel) else tuple(pseudo)
    if len(anns) > n:
        raise Overflow(f"{len(anns)} objects do not fit in a list of length {n}")
    entries = [object_prompt(categories[a.category_id]) for a in anns]
    return TextList(tuple(entries + [""] * (n - len(entries))))


def build_global_prompt(pseudo: PseudoLabel | Sequence[Annotation], categories: Sequence[str],
                        scene_name: str) -> str:
    """``"a cat and a dog in a park"``; distinct names in first-occurrence order.

    Three or more names are comma separated: ``"a cat, a dog and a fish in a park"``.
    With no objects the prompt is just ``"a <scene>"``.
    """
    anns = pseudo.annotations if isinstance(pseudo, PseudoLabel) else tuple(pseudo)
    names: list[str] = []
    for a in anns:
        name = categories[a.category_id]
        if name not in names:
            names.append(name)
    if not names:
        return scene_prompt(scene_name)
    parts = [object_prompt(n) for n in names]
    objects = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
    return f"{objects} in {scene_prompt(scene_name)}"


def paste_on_canvas(patch: np.ndarray, bbox: BBox, height: int, width: int) -> np.ndarray:
    """Resize ``patch`` into ``bbox`` on an otherwise zero ``H x W x 3`` canvas.

    uint8 patches are scaled to [0, 1]; float patches are pasted as they are.
    """
    patch = np.asarray(patch)
    if patch.size == 0:
        raise ValueError("empty patch")
    if patch.dtype == np.uint8:
        patch = patch.astype(np.float32) / 255.0
    left, top = int(round(bbox.x)), int(round(bbox.y))
    right = min(left + int(round(bbox.w)), width)
    bottom = min(top + int(round(bbox.h)), height)
    left, top = max(left, 0), max(top, 0)
    if right - left <= 0 or bottom - top <= 0:
        raise EmptyBox(f"{bbox} covers no pixel on a {width}x{height} canvas")
    canvas = np.zeros((height, width, 3), dtype=np.float32)
    canvas[top:bottom, left:right] = resize_bilinear(patch.astype(np.float32), bottom - top, right - left)
    return canvas


def build_image_list(pseudo: PseudoLabel, pool: ForegroundPool, n: int, rng=None,
                     categories: Sequence[str] | None = None) -> ImageList:
    """One canvas per annotation (same order as the text list), zero-padded to ``n``."""
    rng = check_rng(rng)
    height, width = pseudo.image_size
    if len(pseudo.annotations) > n:
        raise Overflow(f"{len(pseudo.annotations)} objects do not fit in a list of length {n}")
    categories = categories or pool.categories
    canvases = np.zeros((n, height, width, 3), dtype=np.float32)
    for i, ann in enumerate(pseudo.annotations):
        patch = pool.sample(categories[ann.category_id], rng)
        try:
            canvases[i] = paste_on_canvas(patch, ann.bbox, height, width)
        except EmptyBox:
            pass  # sub-pixel box: nothing to paste, the slot stays blank
    return ImageList(canvases)


def build_triplet(pseudo: PseudoLabel, categories: Sequence[str], scene_name: str,
                  pool: ForegroundPool, n: int, rng=None) -> ConditionTriplet:
    rng = check_rng(rng)
    return ConditionTriplet(
        image_list=build_image_list(pseudo, pool, n, rng, categories),
        text_list=build_text_list(pseudo, categories, n),
        global_prompt=build_global_prompt(pseudo, categories, scene_name),
    )


def empty_triplet(n: int, height: int, width: int, scene_name: str) -> ConditionTriplet:
    return ConditionTriplet(ImageList(np.zeros((n, height, width, 3), dtype=np.float32)),
                            TextList(("",) * n), scene_prompt(scene_name))
