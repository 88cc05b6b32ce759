"""Reconstruction losses for dual fine-tuning and foreground-weighted control training."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import torch

from ..exceptions import ShapeMismatch
from .schedule import NoiseSchedule, forward_noise


@dataclass
class TrainBatch:
    """Clean images in [-1, 1] plus the draws that make a loss evaluation deterministic."""

    images: torch.Tensor           # (B, 3, H, W)
    t: torch.Tensor                # (B,)
    eps: torch.Tensor              # (B, 3, H, W)
    context: torch.Tensor          # (B, L, D) prompt embedding
    control: Any = None            # ControlInputs for control training
    mask: torch.Tensor | None = None  # (B, H, W) foreground mask


def _predict(model, x_t, t, context, control):
    if control is None:
        return model(x_t, t, context)
    return model(x_t, t, context, control)


def squared_error(model, x0, t, eps, context, control=None, schedule: NoiseSchedule | None = None):
    """Element-wise ``(eps - eps_theta(x_t, t, ...))^2``."""
    schedule = schedule or model.schedule
    x_t = forward_noise(x0, t, eps, schedule)
    return (eps - _predict(model, x_t, t, context, control)) ** 2


def reconstruction_loss(model, x0, t, eps, context, control=None, schedule=None) -> torch.Tensor:
    return squared_error(model, x0, t, eps, context, control, schedule).mean()


def dual_finetune_loss(model, object_batch: TrainBatch, scene_batch: TrainBatch, lambda_: float = 1.0):
    """Object-crop loss plus ``lambda_`` times the whole-scene loss."""
    obj = reconstruction_loss(model, object_batch.images, object_batch.t, object_batch.eps, object_batch.context)
    scene = reconstruction_loss(model, scene_batch.images, scene_batch.t, scene_batch.eps, scene_batch.context)
    return obj + lambda_ * scene


def control_loss(model, batch: TrainBatch, gamma: float = 25.0, mask: torch.Tensor | None = None,
                 schedule=None) -> torch.Tensor:
    """``mean(e) + gamma * mean(e * M)`` with ``e`` the squared error map.

    The mask is broadcast over channels and the masked term is averaged over
    every element (background entries contribute zeros), so gamma keeps the
    same scale whatever the foreground fraction.
    """
    mask = batch.mask if mask is None else mask
    err = squared_error(model, batch.images, batch.t, batch.eps, batch.context, batch.control, schedule)
    if mask is None:
        raise ValueError("control_loss needs a foreground mask")
    if mask.ndim == 3:
        mask = mask[:, None]
    if mask.shape[0] != err.shape[0] or mask.shape[-2:] != err.shape[-2:] or mask.shape[1] not in (1, err.shape[1]):
        raise ShapeMismatch(f"mask {tuple(mask.shape)} does not match error map {tuple(err.shape)}")
    return err.mean() + gamma * (err * mask.to(err.dtype)).mean()
