"""Ancestral DDPM sampling (optionally strided) and offline foreground pool generation."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from ..conditioning.lists import ConditionTriplet, object_prompt
from ..conditioning.pool import ForegroundPool
from ..validation import check_rng, tensor_to_images
from .model import ControlInputs, ObjectwiseDenoiser
from .schedule import NoiseSchedule


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending timesteps; all ``T`` when ``steps >= T``, else an even stride."""
    if steps <= 0:
        raise ValueError("steps must be positive")
    if steps >= T:
        return np.arange(T)[::-1].copy()
    return np.unique(np.round(np.linspace(0, T - 1, steps)).astype(np.int64))[::-1].copy()


def task_generators(rng, n: int) -> list[torch.Generator]:
    """One torch generator per sample, so results do not depend on batching."""
    rng = check_rng(rng)
    return [torch.Generator().manual_seed(int(s)) for s in rng.integers(0, 2**63 - 1, size=n)]


def _randn(gens: Sequence[torch.Generator], shape, dtype) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g, dtype=torch.float64) for g in gens]).to(dtype)


@torch.no_grad()
def ddpm_sample(model, context: torch.Tensor, control: ControlInputs | None, gens: Sequence[torch.Generator],
                steps: int = 50, schedule: NoiseSchedule | None = None) -> torch.Tensor:
    """Sample ``len(gens)`` images in [-1, 1]; returns ``(B, 3, H, W)``."""
    schedule = schedule or model.schedule
    size = model.config.image_size
    dtype = model.dtype
    ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float64)
    ts = sampling_timesteps(schedule.T, steps)
    x = _randn(gens, (3, size, size), dtype)
    b = x.shape[0]
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        ab_t = ab[t]
        ab_prev = ab[t_prev] if t_prev >= 0 else torch.tensor(1.0, dtype=torch.float64)
        beta = 1.0 - ab_t / ab_prev
        tt = torch.full((b,), int(t), dtype=torch.long)
        eps = model(x, tt, context, control) if control is not None else model(x, tt, context)
        x0 = ((x - (1 - ab_t).sqrt().to(dtype) * eps) / ab_t.sqrt().to(dtype)).clamp(-1, 1)
        coef0 = (ab_prev.sqrt() * beta / (1 - ab_t)).to(dtype)
        coeft = ((1 - beta).sqrt() * (1 - ab_prev) / (1 - ab_t)).to(dtype)
        x = coef0 * x0 + coeft * x
        if t_prev >= 0:
            var = (beta * (1 - ab_prev) / (1 - ab_t)).to(dtype)
            x = x + var.sqrt() * _randn(gens, x.shape[1:], dtype)
    return x.clamp(-1, 1)


def sample_triplets(model: ObjectwiseDenoiser, triplets: Sequence[ConditionTriplet], steps: int = 50,
                    rng=None, batch_size: int = 32, schedule: NoiseSchedule | None = None,
                    use_control: bool = True) -> np.ndarray:
    """Generate one uint8 image per triplet; ``use_control=False`` ignores the lists."""
    gens = task_generators(rng, len(triplets))
    out = []
    model.eval()
    for start in range(0, len(triplets), batch_size):
        chunk = list(triplets[start:start + batch_size])
        context, control = model.encode_triplets(chunk)
        x = ddpm_sample(model, context, control if use_control else None,
                        gens[start:start + batch_size], steps, schedule)
        out.append(tensor_to_images(x))
    size = model.config.image_size
    return np.concatenate(out) if out else np.zeros((0, size, size, 3), np.uint8)


def sample_prompts(model: ObjectwiseDenoiser, prompts: Sequence[str], steps: int = 50, rng=None,
                   batch_size: int = 32, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Generate images from text prompts with the base denoiser only."""
    gens = task_generators(rng, len(prompts))
    out = []
    model.eval()
    for start in range(0, len(prompts), batch_size):
        context = model.embed(list(prompts[start:start + batch_size]))
        out.append(tensor_to_images(ddpm_sample(model, context, None, gens[start:start + batch_size],
                                                steps, schedule)))
    size = model.config.image_size
    return np.concatenate(out) if out else np.zeros((0, size, size, 3), np.uint8)


def sample_image(model: ObjectwiseDenoiser, triplet: ConditionTriplet, schedule: NoiseSchedule | None = None,
                 steps: int = 50, rng=None) -> np.ndarray:
    """One ``H x W x 3`` uint8 image conditioned on ``triplet``."""
    return sample_triplets(model, [triplet], steps, rng, schedule=schedule)[0]


def generate_foreground_pool(model: ObjectwiseDenoiser, categories: Sequence[str], size: int = 16,
                             rng=None, steps: int = 50, batch_size: int = 32) -> ForegroundPool:
    """``size`` images per class from the prompt ``"a <classname>"``."""
    prompts = [object_prompt(c) for c in categories for _ in range(size)]
    images = sample_prompts(model, prompts, steps, rng, batch_size)
    pool = ForegroundPool(tuple(categories))
    for i, img in enumerate(images):
        pool.add(categories[i // size], img)
    return pool
