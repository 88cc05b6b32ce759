"""Noise schedules and the forward (noising) process."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..exceptions import BadSchedule

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise BadSchedule("a schedule needs at least 2 steps")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise BadSchedule("betas must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.beta)

    def alpha_bar_at(self, t: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        ab = torch.as_tensor(self.alpha_bar, dtype=dtype, device=t.device)
        return ab[t.long()]


def cosine_alpha_bar(t: np.ndarray, T: int, s: float = COSINE_OFFSET) -> np.ndarray:
    """Cosine schedule ``f(t) / f(0)`` with ``f(t) = cos^2(((t / T) + s) / (1 + s) * pi / 2)``."""
    f = lambda u: np.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
    return f(np.asarray(t, dtype=np.float64)) / f(0.0)


def make_noise_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4,
                        beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end``, or the cosine schedule.

    For the cosine schedule, ``alpha_bar[t]`` equals ``cosine_alpha_bar(t + 1, T)``
    except where a beta hits the 0.999 cap (the final step).
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise BadSchedule(f"T must be an integer >= 2, got {T!r}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        ab = cosine_alpha_bar(np.arange(0, T + 1), T)
        beta = np.clip(1.0 - ab[1:] / ab[:-1], 1e-12, MAX_BETA)
    else:
        raise BadSchedule(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(beta, kind)


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`` (t per batch item)."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    t = torch.as_tensor(t, device=x0.device)
    if t.ndim == 0:
        t = t.expand(x0.shape[0])
    if torch.any(t < 0) or torch.any(t >= schedule.T):
        raise ValueError(f"t must lie in [0, {schedule.T})")
    ab = schedule.alpha_bar_at(t, dtype=x0.dtype).view(-1, *([1] * (x0.ndim - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
