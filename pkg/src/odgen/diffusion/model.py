"""Toy pixel-space noise predictor with an object-wise control branch.

The base network is a small U-Net (four resolution levels, bottleneck at
H/8) with a sinusoidal time embedding and cross-attention on the prompt
embedding. The control branch is a trainable copy of the encoder half. It
receives the image-list features (added at the H/8 level) and cross-attends
to the fused text-list embedding concatenated with the global prompt. Its
per-level outputs pass through zero-initialized 1x1 convolutions and are
added to the decoder skip connections, so an untrained branch leaves the
base output unchanged.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..conditioning.encoders import (
    ImageListEncoder,
    TextListEncoder,
    TokenHashEmbedder,
    stack_image_lists,
    stack_text_embeddings,
)
from ..conditioning.lists import ConditionTriplet
from .schedule import NoiseSchedule, make_noise_schedule


@dataclass
class ModelConfig:
    image_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 64)
    attn_levels: tuple[int, ...] = (2, 3)
    time_dim: int = 64
    groups: int = 8
    max_objects: int = 4
    text_length: int = 8
    text_dim: int = 64
    vocab_size: int = 4096
    embedder_seed: int = 0
    image_encoder_channels: tuple[int, ...] | None = None
    T: int = 1000
    schedule: str = "linear"

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.attn_levels = tuple(self.attn_levels)
        if self.image_encoder_channels is not None:
            self.image_encoder_channels = tuple(self.image_encoder_channels)
        if len(self.channels) != 4:
            raise ValueError("the U-Net has four levels (bottleneck at H/8)")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


class ControlInputs(NamedTuple):
    canvases: torch.Tensor     # (B, 3N, H, W)
    text_stack: torch.Tensor   # (B, N, L, D)


def _groups(groups: int, channels: int) -> int:
    return math.gcd(groups, channels)


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype, device=t.device) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbedding(nn.Module):
    def __init__(self, base_dim: int, dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.mlp = nn.Sequential(nn.Linear(base_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(timestep_embedding(t, self.base_dim, dtype))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Single-head attention from feature-map pixels to context tokens."""

    def __init__(self, channels: int, context_dim: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(groups, channels), channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(context_dim, channels, bias=False)
        self.v = nn.Linear(context_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, context):
        b, c, h, w = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.k(context), self.v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Level(nn.Module):
    def __init__(self, cin, cout, time_dim, groups, context_dim, attention: bool):
        super().__init__()
        self.block = ResBlock(cin, cout, time_dim, groups)
        self.attn = CrossAttention(cout, context_dim, groups) if attention else None

    def forward(self, x, temb, context):
        h = self.block(x, temb)
        if self.attn is not None:
            h = self.attn(h, context)
        return h


class Middle(nn.Module):
    def __init__(self, channels, time_dim, groups, context_dim):
        super().__init__()
        self.block1 = ResBlock(channels, channels, time_dim, groups)
        self.attn = CrossAttention(channels, context_dim, groups)
        self.block2 = ResBlock(channels, channels, time_dim, groups)

    def forward(self, x, temb, context):
        return self.block2(self.attn(self.block1(x, temb), context), temb)


class Encoder(nn.Module):
    """Input convolution, four levels (downsampling between them) and the middle block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        self.time_embed = TimeEmbedding(ch[0], cfg.time_dim)
        self.conv_in = nn.Conv2d(3, ch[0], 3, padding=1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.levels.append(Level(prev, c, cfg.time_dim, cfg.groups, cfg.text_dim, i in cfg.attn_levels))
            self.downs.append(nn.Conv2d(c, c, 3, stride=2, padding=1) if i < len(ch) - 1 else nn.Identity())
            prev = c
        self.middle = Middle(prev, cfg.time_dim, cfg.groups, cfg.text_dim)

    def forward(self, x, t, context, bottleneck_add=None):
        temb = self.time_embed(t)
        h = self.conv_in(x)
        skips = []
        last = len(self.levels) - 1
        for i, (level, down) in enumerate(zip(self.levels, self.downs)):
            if i == last and bottleneck_add is not None:
                h = h + bottleneck_add
            h = level(h, temb, context)
            skips.append(h)
            h = down(h)
        return skips, self.middle(h, temb, context), temb


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        self.encoder = Encoder(cfg)
        self.ups = nn.ModuleList()
        self.up_levels = nn.ModuleList()
        prev = ch[-1]
        for i in reversed(range(len(ch))):
            self.up_levels.append(Level(prev + ch[i], ch[i], cfg.time_dim, cfg.groups, cfg.text_dim,
                                        i in cfg.attn_levels))
            self.ups.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                          nn.Conv2d(ch[i], ch[i - 1], 3, padding=1)) if i > 0 else nn.Identity())
            prev = ch[i - 1] if i > 0 else ch[0]
        self.norm_out = nn.GroupNorm(_groups(cfg.groups, ch[0]), ch[0])
        self.conv_out = nn.Conv2d(ch[0], 3, 3, padding=1)

    def forward(self, x, t, context, residuals: Sequence[torch.Tensor] | None = None):
        skips, h, temb = self.encoder(x, t, context)
        if residuals is not None:
            *skip_res, mid_res = residuals
            skips = [s + r for s, r in zip(skips, skip_res)]
            h = h + mid_res
        for level, up in zip(self.up_levels, self.ups):
            h = level(torch.cat([h, skips.pop()], dim=1), temb, context)
            h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ControlBranch(nn.Module):
    def __init__(self, cfg: ModelConfig, base_encoder: Encoder):
        super().__init__()
        self.image_encoder = ImageListEncoder(cfg.max_objects, cfg.image_encoder_channels)
        self.text_encoder = TextListEncoder(cfg.max_objects)
        self.encoder = copy.deepcopy(base_encoder)
        self.hint_proj = nn.Conv2d(self.image_encoder.out_channels, cfg.channels[-1], 1)
        self.zero_convs = nn.ModuleList(zero_module(nn.Conv2d(c, c, 1)) for c in cfg.channels)
        self.zero_mid = zero_module(nn.Conv2d(cfg.channels[-1], cfg.channels[-1], 1))

    def forward(self, x, t, global_context, control: ControlInputs):
        hint = self.hint_proj(self.image_encoder(control.canvases))
        fused = self.text_encoder(control.text_stack)
        context = torch.cat([fused, global_context], dim=1)
        skips, mid, _ = self.encoder(x, t, context, bottleneck_add=hint)
        return [z(s) for z, s in zip(self.zero_convs, skips)] + [self.zero_mid(mid)]


class ObjectwiseDenoiser(nn.Module):
    """Noise predictor ``eps(x_t, t, prompt, control)``; the control inputs are optional."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        self.schedule: NoiseSchedule = make_noise_schedule(cfg.T, cfg.schedule)
        self.embedder = TokenHashEmbedder(cfg.text_length, cfg.text_dim, cfg.vocab_size, cfg.embedder_seed)
        self.unet = UNet(cfg)
        self.control = ControlBranch(cfg, self.unet.encoder)

    @property
    def max_objects(self) -> int:
        return self.config.max_objects

    @property
    def dtype(self) -> torch.dtype:
        return self.unet.conv_out.weight.dtype

    def embed(self, prompts: Sequence[str] | str) -> torch.Tensor:
        return self.embedder(prompts).to(self.dtype)

    def control_inputs(self, triplets: Sequence[ConditionTriplet]) -> ControlInputs:
        canvases = stack_image_lists([tr.image_list for tr in triplets]).to(self.dtype)
        text_stack = stack_text_embeddings([tr.text_list for tr in triplets], self.embedder).to(self.dtype)
        return ControlInputs(canvases, text_stack)

    def encode_triplets(self, triplets: Sequence[ConditionTriplet]) -> tuple[torch.Tensor, ControlInputs]:
        """Global-prompt context and control inputs for a batch of triplets."""
        return self.embed([tr.global_prompt for tr in triplets]), self.control_inputs(triplets)

    def reset_control_from_base(self) -> None:
        """Copy the base encoder weights into the control branch (ControlNet initialization)."""
        self.control.encoder.load_state_dict(self.unet.encoder.state_dict())

    def forward(self, x_t, t, context, control: ControlInputs | None = None):
        residuals = None
        if control is not None:
            residuals = self.control(x_t, t, context, control)
        return self.unet(x_t, t, context, residuals)

    def base_parameters(self):
        return self.unet.parameters()

    def control_parameters(self):
        return self.control.parameters()
