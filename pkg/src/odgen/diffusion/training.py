"""Training loops: dual fine-tuning on crops + scenes, and object-wise control training."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..conditioning.lists import build_triplet, object_prompt, scene_prompt
from ..conditioning.masks import rasterize_foreground_mask
from ..conditioning.pool import ForegroundPool
from ..core import DetectionDataset
from ..exceptions import Divergence
from ..imaging import crop_and_resize, resize_bilinear
from ..stats import PseudoLabel
from ..validation import check_rng, images_to_tensor
from .losses import TrainBatch, control_loss, dual_finetune_loss
from .model import ObjectwiseDenoiser

logger = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    batch_size: int = 16
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    log_every: int = 50


class MetricsLog:
    """Append-only JSON-lines writer (a no-op without a path)."""

    def __init__(self, path=None, history: list | None = None):
        self.path = Path(path) if path else None
        self.history = history if history is not None else []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a")
        else:
            self._fh = None

    def write(self, record: dict) -> None:
        self.history.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def finetune_samples(dataset: DetectionDataset, size: int):
    """Object crops and whole scenes at ``size x size`` with their templated prompts."""
    crops, crop_prompts, scenes = [], [], []
    for item in dataset.items:
        scenes.append(resize_bilinear(item.pixels, size, size))
        for ann in item.annotations:
            crops.append(crop_and_resize(item.pixels, ann.bbox, size))
            crop_prompts.append(object_prompt(dataset.categories[ann.category_id]))
    if not crops:
        raise ValueError("dual fine-tuning needs at least one annotated object")
    return np.stack(crops), crop_prompts, np.stack(scenes)


def _noise_draws(n: int, shape, T: int, gen: torch.Generator, dtype):
    t = torch.randint(0, T, (n,), generator=gen)
    eps = torch.randn((n, *shape), generator=gen, dtype=torch.float64).to(dtype)
    return t, eps


def _make_optimizer(params, cfg: OptimizerConfig):
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _check_finite(loss: torch.Tensor, step: int, model, checkpoint_path, on_divergence):
    if torch.isfinite(loss):
        return
    if checkpoint_path is not None and on_divergence is not None:
        on_divergence(model, checkpoint_path)
    raise Divergence(f"non-finite loss {loss.item()} at step {step}")


def train_finetune(model: ObjectwiseDenoiser, dataset: DetectionDataset, lambda_: float = 1.0,
                   steps: int = 2000, optimizer_config: OptimizerConfig | None = None, rng=None,
                   metrics_path=None, history: list | None = None, probe_size: int = 16,
                   checkpoint_path=None, on_divergence: Callable | None = None) -> ObjectwiseDenoiser:
    """Fit the base denoiser on object crops ("a <classname>") and scenes ("a <scene>").

    Each step draws ``batch_size // 2`` crops and as many scenes. A fixed probe
    batch (fixed noise and timesteps) is scored before and after training and
    logged as ``probe_loss``.
    """
    cfg = optimizer_config or OptimizerConfig()
    rng = check_rng(rng)
    if steps <= 0:
        return model
    size = model.config.image_size
    crops, crop_prompts, scenes = finetune_samples(dataset, size)
    crop_t, scene_t = images_to_tensor(crops, model.dtype), images_to_tensor(scenes, model.dtype)
    crop_ctx = model.embed(sorted(set(crop_prompts))).detach()
    prompt_index = {p: i for i, p in enumerate(sorted(set(crop_prompts)))}
    crop_ids = torch.tensor([prompt_index[p] for p in crop_prompts])
    scene_ctx = model.embed(scene_prompt(dataset.scene_name)).detach()
    gen = torch.Generator().manual_seed(int(rng.integers(2**63 - 1)))
    half = max(1, cfg.batch_size // 2)

    def batch(n, g, np_rng):
        oi = torch.from_numpy(np_rng.integers(len(crop_t), size=n))
        si = torch.from_numpy(np_rng.integers(len(scene_t), size=n))
        t_o, e_o = _noise_draws(n, crop_t.shape[1:], model.schedule.T, g, model.dtype)
        t_s, e_s = _noise_draws(n, scene_t.shape[1:], model.schedule.T, g, model.dtype)
        obj = TrainBatch(crop_t[oi], t_o, e_o, crop_ctx[crop_ids[oi]])
        scene = TrainBatch(scene_t[si], t_s, e_s, scene_ctx.expand(n, -1, -1))
        return obj, scene

    probe_rng = np.random.default_rng(int(rng.integers(2**63 - 1)))
    probe = batch(probe_size, torch.Generator().manual_seed(int(probe_rng.integers(2**63 - 1))), probe_rng)

    def probe_loss():
        with torch.no_grad():
            return float(dual_finetune_loss(model, *probe, lambda_))

    params = [p for p in model.unet.parameters() if p.requires_grad]
    opt = _make_optimizer(params, cfg)
    log = MetricsLog(metrics_path, history)
    log.write({"stage": "finetune", "step": 0, "probe_loss": probe_loss()})
    model.train()
    start, running = time.time(), 0.0
    try:
        for step in range(1, steps + 1):
            obj, scene = batch(half, gen, rng)
            loss = dual_finetune_loss(model, obj, scene, lambda_)
            _check_finite(loss, step, model, checkpoint_path, on_divergence)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            running += loss.item()
            if step % cfg.log_every == 0 or step == steps:
                n = cfg.log_every if step % cfg.log_every == 0 else step % cfg.log_every
                log.write({"stage": "finetune", "step": step, "loss": running / n,
                           "elapsed_s": round(time.time() - start, 2)})
                logger.info("finetune step %d loss %.4f", step, running / n)
                running = 0.0
        model.eval()
        log.write({"stage": "finetune", "step": steps, "probe_loss": probe_loss()})
    finally:
        log.close()
    return model


def _control_example(item, dataset, pool, n, rng):
    anns = sorted(item.annotations, key=lambda a: -a.bbox.area)[:n]
    order = rng.permutation(len(anns))
    pseudo = PseudoLabel(tuple(anns[i] for i in order), item.size)
    triplet = build_triplet(pseudo, dataset.categories, dataset.scene_name, pool, n, rng)
    h, w = item.size
    mask = rasterize_foreground_mask(item.annotations, h, w, item.size)
    return triplet, mask


def train_control(model: ObjectwiseDenoiser, dataset: DetectionDataset, pool: ForegroundPool,
                  gamma: float = 25.0, steps: int = 4000, optimizer_config: OptimizerConfig | None = None,
                  rng=None, freeze_base: bool = False, init_from_base: bool = True,
                  metrics_path=None, history: list | None = None, checkpoint_path=None,
                  on_divergence: Callable | None = None) -> ObjectwiseDenoiser:
    """Train the control branch (and, unless frozen, the base) with the foreground-weighted loss.

    Triplets come from the ground-truth annotations with pool images standing
    in for object appearance; list order is shuffled every step.
    """
    cfg = optimizer_config or OptimizerConfig(batch_size=8)
    rng = check_rng(rng)
    present = sorted({dataset.categories[a.category_id] for it in dataset.items for a in it.annotations})
    pool.check_covers(present)
    if steps <= 0:
        return model
    size = model.config.image_size
    if any(item.size != (size, size) for item in dataset.items):
        raise ValueError(f"control training expects {size}x{size} images")
    if init_from_base:
        model.reset_control_from_base()
    images = images_to_tensor(np.stack([it.pixels for it in dataset.items]), model.dtype)
    n_obj = model.max_objects
    gen = torch.Generator().manual_seed(int(rng.integers(2**63 - 1)))

    params = list(model.control.parameters())
    if not freeze_base:
        params += list(model.unet.parameters())
    params = [p for p in params if p.requires_grad]
    for p in model.unet.parameters():
        p.requires_grad_(not freeze_base)
    opt = _make_optimizer(params, cfg)
    log = MetricsLog(metrics_path, history)
    model.train()
    start, running = time.time(), 0.0
    try:
        for step in range(1, steps + 1):
            idx = rng.integers(len(dataset.items), size=cfg.batch_size)
            examples = [_control_example(dataset.items[i], dataset, pool, n_obj, rng) for i in idx]
            triplets = [e[0] for e in examples]
            context, control = model.encode_triplets(triplets)
            t, eps = _noise_draws(len(idx), images.shape[1:], model.schedule.T, gen, model.dtype)
            mask = torch.from_numpy(np.stack([e[1] for e in examples]))
            batch = TrainBatch(images[torch.from_numpy(idx)], t, eps, context.detach(), control, mask)
            loss = control_loss(model, batch, gamma)
            _check_finite(loss, step, model, checkpoint_path, on_divergence)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            running += loss.item()
            if step % cfg.log_every == 0 or step == steps:
                n = cfg.log_every if step % cfg.log_every == 0 else step % cfg.log_every
                log.write({"stage": "train-control", "step": step, "loss": running / n,
                           "elapsed_s": round(time.time() - start, 2)})
                logger.info("control step %d loss %.4f", step, running / n)
                running = 0.0
    finally:
        log.close()
        for p in model.unet.parameters():
            p.requires_grad_(True)
        model.eval()
    return model


def optimizer_config_from_dict(d: dict) -> OptimizerConfig:
    known = {k: v for k, v in d.items() if k in asdict(OptimizerConfig())}
    cfg = OptimizerConfig(**known)
    if not math.isfinite(cfg.lr) or cfg.lr <= 0:
        raise ValueError("learning rate must be positive")
    return cfg
