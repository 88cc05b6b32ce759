"""Foreground/background patch discriminator and corrupted pseudo-label filtering."""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import balanced_accuracy_score
from sklearn.utils.validation import check_is_fitted

from .core import BBox, DetectionDataset, iou
from .diffusion.checkpoint import CHECKPOINT_FORMAT, atomic_torch_save
from .exceptions import ClassMissing, UntrainedClassifierWarning
from .imaging import crop_and_resize
from .stats import PseudoLabel
from .validation import check_binary_labels, check_images, check_rng, images_to_tensor

logger = logging.getLogger(__name__)

BACKGROUND, FOREGROUND = 0, 1
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
MAX_BG_TRIES = 50
BG_IOU_CAP = 0.1


@dataclass(frozen=True)
class PatchSample:
    pixels: np.ndarray
    label: int
    split: str
    source: int = -1


def split_by_image(n_images: int, rng=None, fractions=SPLIT_FRACTIONS) -> np.ndarray:
    """Assign each image index to train/val/test with the given fractions."""
    rng = check_rng(rng)
    order = rng.permutation(n_images)
    n_train = int(round(fractions[0] * n_images))
    n_val = int(round(fractions[1] * n_images))
    splits = np.empty(n_images, dtype=object)
    splits[order[:n_train]] = "train"
    splits[order[n_train:n_train + n_val]] = "val"
    splits[order[n_train + n_val:]] = "test"
    return splits


def crop_patches(dataset: DetectionDataset, per_image_bg: int = 2, rng=None, patch_size: int = 64,
                 fractions=SPLIT_FRACTIONS) -> list[PatchSample]:
    """One foreground patch per box plus up to ``per_image_bg`` background patches per image.

    Background boxes borrow their size from a random foreground box and are
    kept only when their IoU with every annotation of the image is below 0.1
    (at most 50 tries each). Splits are assigned per image.
    """
    rng = check_rng(rng)
    sizes = [(a.bbox.w / it.size[1], a.bbox.h / it.size[0]) for it in dataset.items for a in it.annotations]
    if not sizes:
        raise ValueError("crop_patches needs an annotated dataset")
    splits = split_by_image(len(dataset.items), rng, fractions)
    patches: list[PatchSample] = []
    short = 0
    for i, item in enumerate(dataset.items):
        h_img, w_img = item.size
        for ann in item.annotations:
            patches.append(PatchSample(crop_and_resize(item.pixels, ann.bbox, patch_size), FOREGROUND, splits[i], i))
        found = 0
        for _ in range(per_image_bg):
            for _ in range(MAX_BG_TRIES):
                wn, hn = sizes[int(rng.integers(len(sizes)))]
                w, h = max(1.0, wn * w_img), max(1.0, hn * h_img)
                x = rng.uniform(0, w_img - w)
                y = rng.uniform(0, h_img - h)
                box = BBox(x, y, w, h)
                if all(iou(box, a.bbox) < BG_IOU_CAP for a in item.annotations):
                    patches.append(PatchSample(crop_and_resize(item.pixels, box, patch_size), BACKGROUND, splits[i], i))
                    found += 1
                    break
        short += per_image_bg - found
    if short:
        warnings.warn(f"{short} background patches could not be placed", RuntimeWarning, stacklevel=2)
    return patches


class SmallCNN(nn.Module):
    """Three strided conv layers, global pooling, a feature layer and a logit."""

    def __init__(self, width: int = 16, feature_dim: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(4 * width, feature_dim), nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, 1)

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.body(x))[:, 0]


def _resnet50():
    from torchvision.models import resnet50  # optional, full-scale preset

    net = resnet50(weights=None)
    feat_dim = net.fc.in_features
    net.fc = nn.Identity()

    class _Wrapped(nn.Module):
        def __init__(self):
            super().__init__()
            self.body, self.head = net, nn.Linear(feat_dim, 1)

        def features(self, x):
            return self.body(x)

        def forward(self, x):
            return self.head(self.body(x))[:, 0]

    return _Wrapped()


BACKBONES = {"small-cnn": SmallCNN, "resnet50": _resnet50}


def choose_threshold(scores: np.ndarray, y: np.ndarray, default: float = 0.5) -> float:
    """Threshold maximizing balanced accuracy; ties go to the value closest to ``default``."""
    if len(np.unique(y)) < 2:
        return default
    uniq = np.unique(scores)
    candidates = np.concatenate([[default], (uniq[:-1] + uniq[1:]) / 2, [uniq[0] - 1e-6, uniq[-1] + 1e-6]])
    candidates = candidates[(candidates > 0) & (candidates < 1)]
    accs = np.array([balanced_accuracy_score(y, scores >= c) for c in candidates])
    if np.allclose(accs, accs[0]):
        return default
    best = np.flatnonzero(accs >= accs.max() - 1e-12)
    return float(candidates[best[np.argmin(np.abs(candidates[best] - default))]])


class ForegroundDiscriminator(ClassifierMixin, BaseEstimator):
    """Binary patch classifier: does the patch contain an object?

    ``X`` is a stack of ``(n, H, W, 3)`` uint8 patches of side ``patch_size``;
    ``y`` is 1 for foreground and 0 for background. ``predict_proba`` returns
    ``[p(background), p(foreground)]`` and ``transform`` the penultimate
    features (used as the default FID feature extractor).
    """

    def __init__(self, patch_size=64, backbone="small-cnn", epochs=10, lr=1e-3, batch_size=64,
                 weight_decay=0.0, threshold="auto", random_state=0):
        self.patch_size = patch_size
        self.backbone = backbone
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.threshold = threshold
        self.random_state = random_state

    def _build(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        torch.manual_seed(int(check_rng(self.random_state).integers(2**31)))
        return BACKBONES[self.backbone]()

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, size=(self.patch_size, self.patch_size), name="X")
        y = check_binary_labels(y, len(X))
        if len(np.unique(y)) < 2:
            raise ClassMissing("training patches must include both foreground and background")
        rng = check_rng(self.random_state)
        self.classes_ = np.array([BACKGROUND, FOREGROUND])
        self.model_ = self._build()
        self.history_ = []
        xt = images_to_tensor(X)
        yt = torch.from_numpy(y).float()
        pos_weight = torch.tensor(float((y == 0).sum()) / max(1, (y == 1).sum()))
        opt = torch.optim.Adam(self.model_.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        gen = torch.Generator().manual_seed(int(rng.integers(2**63 - 1)))
        for epoch in range(self.epochs):
            self.model_.train()
            order = torch.randperm(len(xt), generator=gen)
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                batch = xt[idx]
                flip = torch.rand(len(idx), generator=gen) < 0.5
                batch = torch.where(flip[:, None, None, None], batch.flip(-1), batch)
                logits = self.model_(batch)
                loss = F.binary_cross_entropy_with_logits(logits, yt[idx], pos_weight=pos_weight)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.history_.append({"epoch": epoch + 1, "loss": total / len(xt)})
        self.model_.eval()
        if self.epochs == 0:
            warnings.warn("discriminator fitted with 0 epochs; predictions are at chance level",
                          UntrainedClassifierWarning, stacklevel=2)
        if self.threshold == "auto":
            if X_val is not None and y_val is not None and len(X_val):
                self.threshold_ = choose_threshold(self.foreground_score(X_val),
                                                   check_binary_labels(y_val, len(X_val)))
            else:
                self.threshold_ = 0.5
        else:
            self.threshold_ = float(self.threshold)
        return self

    @torch.no_grad()
    def _forward(self, X, features=False):
        check_is_fitted(self, "model_")
        X = check_images(X, size=(self.patch_size, self.patch_size), name="X")
        out = []
        for start in range(0, len(X), 256):
            xt = images_to_tensor(X[start:start + 256])
            out.append(self.model_.features(xt) if features else torch.sigmoid(self.model_(xt)))
        if not out:
            return np.zeros((0,))
        return torch.cat(out).double().numpy()

    def foreground_score(self, X) -> np.ndarray:
        return self._forward(X)

    def predict_proba(self, X) -> np.ndarray:
        p = self.foreground_score(X)
        return np.stack([1 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.foreground_score(X) >= self.threshold_).astype(np.int64)

    def transform(self, X) -> np.ndarray:
        return self._forward(X, features=True)

    def score_boxes(self, image: np.ndarray, boxes: Sequence[BBox]) -> np.ndarray:
        if not boxes:
            return np.zeros(0)
        crops = np.stack([crop_and_resize(image, b, self.patch_size) for b in boxes])
        return self.foreground_score(crops)

    def save(self, path) -> Path:
        check_is_fitted(self, "model_")
        params = self.get_params()
        return atomic_torch_save({
            "format": CHECKPOINT_FORMAT,
            "kind": "discriminator",
            "config": params,
            "config_hash": _params_hash(params),
            "state_dict": self.model_.state_dict(),
            "meta": {"threshold": self.threshold_, "history": self.history_},
        }, path)

    @classmethod
    def load(cls, path) -> "ForegroundDiscriminator":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("kind") != "discriminator":
            raise ValueError(f"{path} is not a discriminator checkpoint")
        disc = cls(**blob["config"])
        disc.model_ = disc._build()
        disc.model_.load_state_dict(blob["state_dict"])
        disc.model_.eval()
        disc.classes_ = np.array([BACKGROUND, FOREGROUND])
        disc.threshold_ = float(blob["meta"]["threshold"])
        disc.history_ = blob["meta"].get("history", [])
        return disc


def _params_hash(params: dict) -> str:
    return hashlib.sha256(json.dumps(params, sort_keys=True, default=str).encode()).hexdigest()


def _arrays(patches: Sequence[PatchSample], split: str):
    sel = [p for p in patches if p.split == split]
    if not sel:
        return np.zeros((0, 1, 1, 3), np.uint8), np.zeros(0, np.int64)
    return np.stack([p.pixels for p in sel]), np.array([p.label for p in sel], dtype=np.int64)


def train_discriminator(patches: Sequence[PatchSample], epochs: int = 10, optimizer_config=None,
                        random_state=0, **kwargs) -> tuple[ForegroundDiscriminator, dict]:
    """Fit on the train split, pick the threshold on val, report accuracy on val and test."""
    opt = dict(optimizer_config or {})
    X_tr, y_tr = _arrays(patches, "train")
    X_va, y_va = _arrays(patches, "val")
    X_te, y_te = _arrays(patches, "test")
    for name, y in (("train", y_tr), ("val", y_va), ("test", y_te)):
        if len(np.unique(y)) < 2:
            raise ClassMissing(f"the {name} split lacks foreground or background patches")
    patch_size = X_tr.shape[1]
    disc = ForegroundDiscriminator(patch_size=patch_size, epochs=epochs, random_state=random_state,
                                   **{k: v for k, v in opt.items() if k in ("lr", "batch_size", "weight_decay")},
                                   **kwargs)
    disc.fit(X_tr, y_tr, X_va, y_va)
    report = {
        "threshold": disc.threshold_,
        "n_train": int(len(y_tr)), "n_val": int(len(y_va)), "n_test": int(len(y_te)),
        "val_accuracy": float(disc.score(X_va, y_va)),
        "test_accuracy": float(disc.score(X_te, y_te)),
        "test_balanced_accuracy": float(balanced_accuracy_score(y_te, disc.predict(X_te))),
        "test_fg_recall": float(disc.predict(X_te)[y_te == 1].mean()),
    }
    if report["val_accuracy"] < 0.6:
        warnings.warn(f"discriminator validation accuracy {report['val_accuracy']:.3f} is near chance",
                      UntrainedClassifierWarning, stacklevel=2)
    logger.info("discriminator: %s", report)
    return disc, report


@dataclass
class FilterResult:
    pseudo: PseudoLabel
    dropped: bool
    scores: np.ndarray
    kept: np.ndarray
    original: PseudoLabel = field(repr=False, default=None)

    @property
    def n_removed(self) -> int:
        return int((~self.kept).sum())

    def decisions(self) -> list[dict]:
        return [{"category_id": a.category_id, "box": [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h],
                 "score": float(s), "kept": bool(k)}
                for a, s, k in zip(self.original.annotations, self.scores, self.kept)]


def filter_pseudo_labels(image: np.ndarray, pseudo: PseudoLabel, disc: ForegroundDiscriminator,
                         threshold: float | None = None) -> FilterResult:
    """Drop annotations whose crop scores below the threshold.

    ``dropped`` is set when a non-empty pseudo-label loses every box.
    """
    tau = disc.threshold_ if threshold is None else threshold
    scores = disc.score_boxes(image, [a.bbox for a in pseudo.annotations])
    kept = scores >= tau
    anns = tuple(a for a, k in zip(pseudo.annotations, kept) if k)
    dropped = len(pseudo.annotations) > 0 and not anns
    return FilterResult(PseudoLabel(anns, pseudo.image_size), dropped, scores, kept, pseudo)
