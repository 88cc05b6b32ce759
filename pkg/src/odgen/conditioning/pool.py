"""Offline pool of generated foreground objects, one folder per class."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ..exceptions import PoolMiss
from ..validation import check_rng


@dataclass
class ForegroundPool:
    """Per-class object images. On disk: ``<root>/<classname>/<idx>.png``."""

    categories: tuple[str, ...]
    images: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        self.categories = tuple(self.categories)
        for name in self.categories:
            self.images.setdefault(name, [])

    def add(self, category: str, image: np.ndarray) -> None:
        if category not in self.images:
            raise KeyError(f"unknown category {category!r}")
        self.images[category].append(np.asarray(image, dtype=np.uint8))

    def sample(self, category: str, rng=None) -> np.ndarray:
        entries = self.images.get(category)
        if not entries:
            raise PoolMiss(f"foreground pool has no image of {category!r}")
        return entries[int(check_rng(rng).integers(len(entries)))]

    def missing(self, categories: Sequence[str] | None = None) -> list[str]:
        return [c for c in (categories or self.categories) if not self.images.get(c)]

    def check_covers(self, categories: Sequence[str] | None = None) -> None:
        missing = self.missing(categories)
        if missing:
            raise PoolMiss(f"foreground pool lacks categories {missing}")

    def __len__(self) -> int:
        return sum(len(v) for v in self.images.values())

    def save(self, root) -> Path:
        root = Path(root)
        for name in self.categories:
            folder = root / name
            folder.mkdir(parents=True, exist_ok=True)
            for i, img in enumerate(self.images[name]):
                Image.fromarray(img).save(folder / f"{i}.png")
        return root

    @classmethod
    def load(cls, root, categories: Sequence[str]) -> "ForegroundPool":
        root = Path(root)
        pool = cls(tuple(categories))
        for name in pool.categories:
            folder = root / name
            if not folder.is_dir():
                continue
            files = sorted(folder.glob("*.png"), key=lambda p: (len(p.stem), p.stem))
            for f in files:
                with Image.open(f) as im:
                    pool.add(name, np.asarray(im.convert("RGB")))
        return pool
