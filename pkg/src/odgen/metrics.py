"""Fidelity (Fréchet distance) and layout-consistency metrics."""
from __future__ import annotations

import warnings
from typing import Callable

import numpy as np
from scipy import linalg

from .core import DetectionDataset
from .filtering import ForegroundDiscriminator
from .imaging import resize_bilinear

FID_EPS = 1e-6


def gaussian_fit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ValueError("need at least two feature vectors of shape (n, d)")
    return feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False))


def _sqrtm(a: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        root, _ = linalg.sqrtm(a, disp=False)
    return root


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = FID_EPS) -> float:
    """``||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    When the product is singular enough that the square root is not finite,
    ``eps * I`` is added to both covariances.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    sigma1, sigma2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ValueError("both Gaussians must have the same dimension")
    diff = mu1 - mu2
    covmean = _sqrtm(sigma1 @ sigma2)
    if not np.isfinite(covmean).all():
        warnings.warn(f"singular covariance product; adding {eps} to the diagonal", RuntimeWarning, stacklevel=2)
        offset = np.eye(sigma1.shape[0]) * eps
        covmean = _sqrtm((sigma1 + offset) @ (sigma2 + offset))
    if np.iscomplexobj(covmean):
        if not np.allclose(np.diagonal(covmean).imag, 0, atol=1e-3):
            raise ValueError(f"imaginary component {np.max(np.abs(covmean.imag))} in matrix square root")
        covmean = covmean.real
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2 * np.trace(covmean))


def compute_fid(images_a, images_b, feature_extractor: Callable[[np.ndarray], np.ndarray]) -> float:
    """Fréchet distance between Gaussian fits of extractor features of two image sets."""
    if len(images_a) == 0 or len(images_b) == 0:
        raise ValueError("both image sets must be non-empty")
    mu_a, s_a = gaussian_fit(feature_extractor(np.asarray(images_a)))
    mu_b, s_b = gaussian_fit(feature_extractor(np.asarray(images_b)))
    return frechet_distance(mu_a, s_a, mu_b, s_b)


def discriminator_features(disc: ForegroundDiscriminator) -> Callable[[np.ndarray], np.ndarray]:
    """Feature extractor: resize whole images to the patch size, take penultimate features."""
    def extract(images: np.ndarray) -> np.ndarray:
        resized = np.stack([resize_bilinear(im, disc.patch_size, disc.patch_size) for im in images])
        return disc.transform(resized)

    extract.name = f"discriminator-penultimate[{disc.backbone}]"
    return extract


def layout_consistency(dataset: DetectionDataset, disc: ForegroundDiscriminator,
                       threshold: float | None = None) -> float:
    """Fraction of annotation boxes the discriminator scores as foreground (NaN when there are none)."""
    tau = disc.threshold_ if threshold is None else threshold
    scores = [disc.score_boxes(item.pixels, [a.bbox for a in item.annotations])
              for item in dataset.items if item.annotations]
    if not scores:
        warnings.warn("no boxes to score; realization rate is undefined", RuntimeWarning, stacklevel=2)
        return float("nan")
    return float(np.mean(np.concatenate(scores) >= tau))
