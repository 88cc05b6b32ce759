"""Gaussian layout model: fitting on a detection dataset and sampling pseudo-labels.

Per-image object counts follow a K-dimensional joint normal. For every class,
the top-left corner (x, y), the area and the aspect ratio (w / h) follow
independent 1-D normals. Coordinates and areas are normalized by the image
size before fitting, so a fitted model transfers across resolutions; the
ratio is measured in normalized units, ``(w / W) / (h / H)``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Annotation, BBox, DetectionDataset, LabeledImage, clip_bbox
from .exceptions import EmptyBox, InsufficientData, MissingCategory
from .validation import check_rng

COV_EPS = 1e-6
MAX_BOX_TRIES = 20
STATS_FORMAT = "odgen-layout-stats/1"


@dataclass(frozen=True)
class ClassCountStats:
    mu: np.ndarray
    sigma: np.ndarray
    max_objects: int
    n_images: int = 0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (mu.size, mu.size):
            raise ValueError(f"sigma shape {sigma.shape} does not match K={mu.size}")
        if not np.allclose(sigma, sigma.T):
            raise ValueError("sigma must be symmetric")
        if np.any(mu < 0):
            raise ValueError("mean counts must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "max_objects", int(self.max_objects))

    @property
    def num_categories(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class CategoryBoxStats:
    mu_x: float
    var_x: float
    mu_y: float
    var_y: float
    mu_area: float
    var_area: float
    mu_ratio: float
    var_ratio: float
    n: int = 1

    def __post_init__(self):
        for name in ("var_x", "var_y", "var_area", "var_ratio"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.mu_area <= 0 or self.mu_ratio <= 0:
            raise ValueError("mean area and mean ratio must be positive")

    @property
    def means(self) -> np.ndarray:
        return np.array([self.mu_x, self.mu_y, self.mu_area, self.mu_ratio])

    @property
    def stds(self) -> np.ndarray:
        return np.sqrt([self.var_x, self.var_y, self.var_area, self.var_ratio])


@dataclass(frozen=True)
class BoxAttrStats:
    categories: tuple[str, ...]
    per_category: tuple[CategoryBoxStats | None, ...]

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "per_category", tuple(self.per_category))
        if len(self.categories) != len(self.per_category):
            raise ValueError("one entry per category is required")

    @property
    def missing_categories(self) -> list[int]:
        return [k for k, s in enumerate(self.per_category) if s is None]

    def __getitem__(self, category: int) -> CategoryBoxStats | None:
        return self.per_category[category]


@dataclass(frozen=True)
class PseudoLabel:
    annotations: tuple[Annotation, ...]
    image_size: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))

    def __len__(self) -> int:
        return len(self.annotations)

    @property
    def category_ids(self) -> list[int]:
        return [a.category_id for a in self.annotations]


def normalized_box_features(dataset: DetectionDataset):
    """Yield ``(category, x, y, area, ratio)`` in normalized image units."""
    for item in dataset.items:
        h_img, w_img = item.size
        for ann in item.annotations:
            b = ann.bbox
            wn, hn = b.w / w_img, b.h / h_img
            yield ann.category_id, b.x / w_img, b.y / h_img, wn * hn, wn / hn


def estimate_count_stats(dataset: DetectionDataset, eps: float = COV_EPS) -> ClassCountStats:
    """Sample mean and unbiased covariance (+ eps * I) of per-image class counts."""
    counts = dataset.count_matrix().astype(np.float64)
    n = counts.shape[0]
    if n < 2:
        raise InsufficientData(f"need at least 2 images to fit a covariance, got {n}")
    mu = counts.mean(axis=0)
    centered = counts - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = 0.5 * (sigma + sigma.T) + eps * np.eye(counts.shape[1])
    return ClassCountStats(mu, sigma, dataset.max_objects(), n)


def estimate_box_stats(dataset: DetectionDataset) -> BoxAttrStats:
    """Per-class normals for x, y, area and ratio.

    Variances are unbiased; a class with a single box gets zero variance.
    Classes without boxes are recorded as missing (``None``) and reported
    with a :class:`MissingCategory` warning.
    """
    k = dataset.num_categories
    feats: list[list[tuple[float, ...]]] = [[] for _ in range(k)]
    for cat, *values in normalized_box_features(dataset):
        feats[cat].append(tuple(values))
    per_cat = []
    for cat in range(k):
        if not feats[cat]:
            warnings.warn(f"category {dataset.categories[cat]!r} has no boxes; "
                          "it will never be sampled", MissingCategory, stacklevel=2)
            per_cat.append(None)
            continue
        arr = np.asarray(feats[cat])
        mu = arr.mean(axis=0)
        var = arr.var(axis=0, ddof=1) if len(arr) > 1 else np.zeros(4)
        per_cat.append(CategoryBoxStats(*(float(v) for pair in zip(mu, var) for v in pair), n=len(arr)))
    return BoxAttrStats(dataset.categories, tuple(per_cat))


def _mvn_factor(sigma: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(sigma)
        return vecs * np.sqrt(np.clip(vals, 0, None))


def sample_object_counts(stats: ClassCountStats, rng=None, max_objects: int | None = None,
                         allowed: Sequence[bool] | None = None) -> np.ndarray:
    """Draw one K-vector of object counts.

    The Gaussian draw is rounded to the nearest integer and clamped at 0.
    Classes not in ``allowed`` are zeroed. If the total exceeds the cap N,
    objects are dropped uniformly at random until the total equals N.
    """
    rng = check_rng(rng)
    cap = stats.max_objects if max_objects is None else int(max_objects)
    z = stats.mu + _mvn_factor(stats.sigma) @ rng.standard_normal(stats.num_categories)
    counts = np.clip(np.rint(z), 0, None).astype(np.int64)
    if allowed is not None:
        counts[~np.asarray(allowed, dtype=bool)] = 0
    total = int(counts.sum())
    if total > cap:
        owners = np.repeat(np.arange(counts.size), counts)
        keep = rng.choice(total, size=cap, replace=False)
        counts = np.bincount(owners[keep], minlength=counts.size).astype(np.int64)
    return counts


def _mean_box(s: CategoryBoxStats) -> np.ndarray:
    w = min(np.sqrt(s.mu_area * s.mu_ratio), 1.0)
    h = min(np.sqrt(s.mu_area / s.mu_ratio), 1.0)
    x = min(max(s.mu_x, 0.0), 1.0 - w)
    y = min(max(s.mu_y, 0.0), 1.0 - h)
    return np.array([x, y, w, h])


def _sample_boxes(s: CategoryBoxStats, n: int, image_size, rng) -> np.ndarray:
    """Vectorized box draws; returns ``(n, 4)`` pixel boxes ``x, y, w, h`` (clipped)."""
    height, width = image_size
    out = np.zeros((n, 4))
    pending = np.ones(n, dtype=bool)
    means, stds = s.means, s.stds
    for _ in range(MAX_BOX_TRIES):
        idx = np.flatnonzero(pending)
        if idx.size == 0:
            break
        draw = rng.normal(means, stds, size=(idx.size, 4))
        x, y, area, ratio = draw.T
        valid = (area > 0) & (ratio > 0)
        safe_area = np.where(valid, area, 1.0)
        safe_ratio = np.where(valid, ratio, 1.0)
        wn = np.sqrt(safe_area * safe_ratio)
        hn = np.sqrt(safe_area / safe_ratio)
        x1 = np.clip(x * width, 0, width)
        y1 = np.clip(y * height, 0, height)
        x2 = np.clip((x + wn) * width, 0, width)
        y2 = np.clip((y + hn) * height, 0, height)
        valid &= (x2 - x1 > 0) & (y2 - y1 > 0)
        good = idx[valid]
        out[good] = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)[valid]
        pending[good] = False
    if pending.any():
        mx, my, mw, mh = _mean_box(s)
        out[pending] = [mx * width, my * height, mw * width, mh * height]
    return out


def sample_bbox(stats: BoxAttrStats, category: int, image_size, rng=None) -> BBox:
    """Draw one box for ``category`` on an image of ``image_size = (H, W)``.

    Invalid draws (area <= 0, ratio <= 0, or empty after clipping) are
    redrawn up to 20 times, after which the mean box is returned.
    """
    s = stats[category]
    if s is None:
        raise KeyError(f"no box statistics for category {category}")
    rng = check_rng(rng)
    x, y, w, h = _sample_boxes(s, 1, image_size, rng)[0]
    return clip_bbox(BBox(x, y, w, h), image_size[1], image_size[0])


def sample_pseudo_label(count_stats: ClassCountStats, box_stats: BoxAttrStats, image_size,
                        rng=None, max_objects: int | None = None) -> PseudoLabel:
    rng = check_rng(rng)
    allowed = [s is not None for s in box_stats.per_category]
    counts = sample_object_counts(count_stats, rng, max_objects=max_objects, allowed=allowed)
    height, width = image_size
    anns = []
    for cat, n in enumerate(counts):
        if n == 0:
            continue
        for x, y, w, h in _sample_boxes(box_stats[cat], int(n), image_size, rng):
            try:
                anns.append(Annotation(cat, clip_bbox(BBox(x, y, w, h), width, height)))
            except EmptyBox:
                continue
    anns.sort(key=lambda a: -a.bbox.area)
    return PseudoLabel(tuple(anns), (height, width))


def stats_to_dict(count_stats: ClassCountStats, box_stats: BoxAttrStats) -> dict:
    return {
        "format": STATS_FORMAT,
        "categories": list(box_stats.categories),
        "counts": {
            "mu": count_stats.mu.tolist(),
            "sigma": count_stats.sigma.tolist(),
            "max_objects": count_stats.max_objects,
            "n_images": count_stats.n_images,
        },
        "boxes": {
            name: (asdict(s) if s is not None else None)
            for name, s in zip(box_stats.categories, box_stats.per_category)
        },
    }


def stats_from_dict(data: dict) -> tuple[ClassCountStats, BoxAttrStats]:
    if data.get("format") != STATS_FORMAT:
        raise ValueError(f"unsupported stats format {data.get('format')!r}")
    c = data["counts"]
    count_stats = ClassCountStats(np.array(c["mu"]), np.array(c["sigma"]), c["max_objects"], c.get("n_images", 0))
    cats = tuple(data["categories"])
    per_cat = tuple(CategoryBoxStats(**data["boxes"][name]) if data["boxes"].get(name) else None for name in cats)
    return count_stats, BoxAttrStats(cats, per_cat)


def save_stats(path, count_stats: ClassCountStats, box_stats: BoxAttrStats) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(stats_to_dict(count_stats, box_stats), fh, indent=2)
        fh.write("\n")
    return path


def load_stats(path) -> tuple[ClassCountStats, BoxAttrStats]:
    with open(path) as fh:
        return stats_from_dict(json.load(fh))


class LayoutSampler(BaseEstimator):
    """Fit the Gaussian layout model on a dataset and draw pseudo-labels.

    Parameters
    ----------
    max_objects : int or "auto"
        Cap N on objects per pseudo-label; "auto" uses the training set's
        maximum objects per image.
    image_size : tuple (H, W) or None
        Size of sampled pseudo-labels; None reuses the first training image size.
    eps : float
        Diagonal regularization added to the count covariance.
    """

    def __init__(self, max_objects="auto", image_size=None, eps=COV_EPS):
        self.max_objects = max_objects
        self.image_size = image_size
        self.eps = eps

    def fit(self, dataset: DetectionDataset, y=None):
        self.count_stats_ = estimate_count_stats(dataset, eps=self.eps)
        self.box_stats_ = estimate_box_stats(dataset)
        self.categories_ = dataset.categories
        if self.max_objects == "auto":
            self.n_objects_ = self.count_stats_.max_objects
        else:
            self.n_objects_ = int(self.max_objects)
        if self.image_size is not None:
            self.image_size_ = tuple(self.image_size)
        elif dataset.items:
            self.image_size_ = dataset.items[0].size
        return self

    def sample(self, n_samples: int = 1, random_state=None) -> list[PseudoLabel]:
        check_is_fitted(self, "count_stats_")
        rng = check_rng(random_state)
        return [sample_pseudo_label(self.count_stats_, self.box_stats_, self.image_size_,
                                    rng, max_objects=self.n_objects_)
                for _ in range(n_samples)]

    def save(self, path) -> Path:
        check_is_fitted(self, "count_stats_")
        return save_stats(path, self.count_stats_, self.box_stats_)

    @classmethod
    def load(cls, path, image_size, max_objects="auto") -> "LayoutSampler":
        count_stats, box_stats = load_stats(path)
        sampler = cls(max_objects=max_objects, image_size=image_size)
        sampler.count_stats_, sampler.box_stats_ = count_stats, box_stats
        sampler.categories_ = box_stats.categories
        sampler.n_objects_ = count_stats.max_objects if max_objects == "auto" else int(max_objects)
        sampler.image_size_ = tuple(image_size)
        return sampler


def pseudo_labels_to_dataset(pseudo_labels: Sequence[PseudoLabel], categories, scene_name,
                             split: str = "train") -> DetectionDataset:
    """Wrap pseudo-labels into a dataset of blank images (for re-fitting)."""
    blanks: dict[tuple[int, int], np.ndarray] = {}
    items = []
    for p in pseudo_labels:
        if p.image_size not in blanks:
            blank = np.zeros((*p.image_size, 3), dtype=np.uint8)
            blank.flags.writeable = False
            blanks[p.image_size] = blank
        items.append(LabeledImage(blanks[p.image_size], p.annotations))
    return DetectionDataset(tuple(categories), scene_name, split, tuple(items))


__all__ = [
    "ClassCountStats", "CategoryBoxStats", "BoxAttrStats", "PseudoLabel", "LayoutSampler",
    "estimate_count_stats", "estimate_box_stats", "sample_object_counts", "sample_bbox",
    "sample_pseudo_label", "save_stats", "load_stats", "stats_to_dict", "stats_from_dict",
    "pseudo_labels_to_dataset", "normalized_box_features",
]
