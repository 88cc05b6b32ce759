"""Checkpoint container: ``torch.save`` of a dict with config, config hash and parameters.

Layout::

    {"format": "odgen-checkpoint/1",
     "kind": "denoiser" | "discriminator",
     "config": {...},            # constructor arguments
     "config_hash": "<sha256>",  # of the canonical JSON config
     "state_dict": {...},
     "meta": {...}}              # free-form (stage, step, metrics)
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

from .model import ModelConfig, ObjectwiseDenoiser

CHECKPOINT_FORMAT = "odgen-checkpoint/1"


def atomic_torch_save(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def save_checkpoint(model: ObjectwiseDenoiser, path, meta: dict | None = None) -> Path:
    return atomic_torch_save({
        "format": CHECKPOINT_FORMAT,
        "kind": "denoiser",
        "config": model.config.to_dict(),
        "config_hash": model.config.digest(),
        "state_dict": model.state_dict(),
        "meta": meta or {},
    }, path)


def load_checkpoint(path) -> ObjectwiseDenoiser:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("kind") != "denoiser":
        raise ValueError(f"{path} is not an odgen denoiser checkpoint")
    config = ModelConfig(**blob["config"])
    if config.digest() != blob["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    model = ObjectwiseDenoiser(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
