"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numbers

import numpy as np
import torch


def check_rng(seed=None):
    """Turn ``seed`` into a numpy random generator.

    Accepts None, an int, a ``SeedSequence``, a ``Generator`` or a legacy
    ``RandomState`` (returned unchanged).
    """
    if isinstance(seed, (np.random.Generator, np.random.RandomState)):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise ValueError(f"{seed!r} cannot be used to seed a random generator")


def torch_generator(rng) -> torch.Generator:
    """A torch CPU generator seeded from a numpy generator."""
    g = torch.Generator()
    g.manual_seed(int(check_rng(rng).integers(0, 2**63 - 1)))
    return g


def check_images(images, *, size=None, name="images") -> np.ndarray:
    """Validate a batch of H x W x 3 uint8 images and stack it."""
    arr = np.asarray(images) if not isinstance(images, (list, tuple)) else np.stack([np.asarray(a) for a in images])
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (n, H, W, 3), got {arr.shape}")
    if size is not None and tuple(arr.shape[1:3]) != tuple(size):
        raise ValueError(f"{name} must be {size[0]}x{size[1]}, got {arr.shape[1]}x{arr.shape[2]}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError(f"{name} must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def check_binary_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.size != n:
        raise ValueError(f"got {y.size} labels for {n} samples")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (background) or 1 (foreground)")
    return y.astype(np.int64)


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(n, H, W, 3)`` uint8 -> ``(n, 3, H, W)`` float in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(images)).to(dtype)
    return t.permute(0, 3, 1, 2) / 127.5 - 1.0


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    """``(n, 3, H, W)`` in [-1, 1] -> ``(n, H, W, 3)`` uint8 (clamped)."""
    x = x.detach().clamp(-1, 1)
    x = ((x + 1.0) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).contiguous().numpy()
