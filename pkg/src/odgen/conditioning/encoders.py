"""Text embedder and the two list encoders (text list -> one embedding, image list -> features)."""
from __future__ import annotations

import zlib
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import yaml

from ..exceptions import BadEmbedderShape, ShapeMismatch
from .lists import ImageList, TextList


class TokenHashEmbedder(nn.Module):
    """Toy stand-in for a frozen text encoder.

    Words are hashed into a fixed table; the output for a string is
    ``token_embedding + position_embedding`` for a BOS token, the words, and
    padding up to ``length`` tokens. The empty string maps to BOS + padding.
    Weights are seeded and frozen unless ``trainable=True``.
    """

    PAD, BOS = 0, 1

    def __init__(self, length: int = 8, dim: int = 64, vocab_size: int = 4096, seed: int = 0,
                 trainable: bool = False):
        super().__init__()
        self.length, self.dim, self.vocab_size = length, dim, vocab_size
        g = torch.Generator().manual_seed(seed)
        self.token = nn.Parameter(torch.randn(vocab_size, dim, generator=g), requires_grad=trainable)
        self.position = nn.Parameter(0.1 * torch.randn(length, dim, generator=g), requires_grad=trainable)

    def token_ids(self, text: str) -> list[int]:
        ids = [self.BOS]
        for word in text.lower().split():
            ids.append(2 + zlib.crc32(word.encode("utf-8")) % (self.vocab_size - 2))
        ids = ids[: self.length]
        return ids + [self.PAD] * (self.length - len(ids))

    def forward(self, texts: Sequence[str] | str) -> torch.Tensor:
        if isinstance(texts, str):
            texts = [texts]
        ids = torch.tensor([self.token_ids(t) for t in texts], dtype=torch.long,
                           device=self.token.device)
        return self.token[ids] + self.position


def check_embedding(emb: torch.Tensor, length: int, dim: int) -> torch.Tensor:
    if emb.shape[-2:] != (length, dim):
        raise BadEmbedderShape(f"embedder returned {tuple(emb.shape)}, expected (..., {length}, {dim})")
    return emb


def text_encoder_channels(n: int) -> list[int]:
    """``[N, N//2, N//4, N//8, 1]``; zero widths (N < 8) are raised to 1."""
    return [n] + [max(1, n // d) for d in (2, 4, 8)] + [1]


class TextListEncoder(nn.Module):
    """Fuses N stacked ``L x D`` embeddings into one with four 3x3 stride-1 convolutions."""

    def __init__(self, n: int):
        super().__init__()
        self.n = n
        self.channels = text_encoder_channels(n)
        layers: list[nn.Module] = []
        for i, (cin, cout) in enumerate(zip(self.channels[:-1], self.channels[1:])):
            layers.append(nn.Conv2d(cin, cout, kernel_size=3, stride=1, padding=1))
            if i < 3:
                layers.append(nn.SiLU())
        self.net = nn.Sequential(*layers)

    def forward(self, stacked: torch.Tensor) -> torch.Tensor:
        """``(B, N, L, D) -> (B, L, D)``."""
        if stacked.ndim != 4 or stacked.shape[1] != self.n:
            raise ShapeMismatch(f"expected (B, {self.n}, L, D), got {tuple(stacked.shape)}")
        return self.net(stacked)[:, 0]


@lru_cache(maxsize=1)
def _channel_table() -> dict:
    text = resources.files("odgen").joinpath("presets/image_encoder_channels.yaml").read_text()
    table = yaml.safe_load(text)
    table["presets"] = {int(k): list(v) for k, v in table["presets"].items()}
    return table


def image_encoder_channels(n: int, use_presets: bool = True) -> list[int]:
    """Output channels of the four image-encoder layers for list length ``n``."""
    table = _channel_table()
    if use_presets and n in table["presets"]:
        return list(table["presets"][n])
    ladder = table["ladder"]
    need = max(16, 3 * n)
    first = next((c for c in ladder if c >= need), need)

    def step(c: int) -> int:
        if c >= 256:
            return 256
        return min(next(v for v in ladder if v > c), 256)

    second = step(first)
    return [first, second, step(second), 256]


class ImageListEncoder(nn.Module):
    """Four 3x3 convolutions mapping ``3N x H x W`` to ``C x H/8 x W/8`` (strides 1, 2, 2, 2)."""

    def __init__(self, n: int, channels: Sequence[int] | None = None):
        super().__init__()
        self.n = n
        self.channels = list(channels) if channels is not None else image_encoder_channels(n)
        if len(self.channels) != 4:
            raise ValueError("the image encoder has exactly four layers")
        cin = 3 * n
        layers: list[nn.Module] = []
        for i, (cout, stride) in enumerate(zip(self.channels, (1, 2, 2, 2))):
            layers.append(nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1))
            if i < 3:
                layers.append(nn.SiLU())
            cin = cout
        self.net = nn.Sequential(*layers)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def forward(self, canvases: torch.Tensor) -> torch.Tensor:
        if canvases.ndim != 4 or canvases.shape[1] != 3 * self.n:
            raise ShapeMismatch(f"expected (B, {3 * self.n}, H, W), got {tuple(canvases.shape)}")
        return self.net(canvases)


def stack_text_embeddings(text_lists: Sequence[TextList], embedder: nn.Module) -> torch.Tensor:
    """Embed every entry separately: ``(B, N, L, D)``."""
    n = len(text_lists[0])
    flat = [e for tl in text_lists for e in tl.entries]
    if any(len(tl) != n for tl in text_lists):
        raise ShapeMismatch("all text lists in a batch must share N")
    emb = embedder(flat)
    if emb.ndim != 3:
        raise BadEmbedderShape(f"embedder returned {tuple(emb.shape)}, expected (n, L, D)")
    return emb.reshape(len(text_lists), n, *emb.shape[1:])


def stack_image_lists(image_lists: Sequence[ImageList]) -> torch.Tensor:
    """Channel-concatenated canvases: ``(B, 3N, H, W)``."""
    shapes = {il.canvases.shape for il in image_lists}
    if len(shapes) != 1:
        raise ShapeMismatch(f"image lists have differing shapes {sorted(shapes)}")
    return torch.from_numpy(np.stack([il.channel_stack() for il in image_lists]))


def encode_text_list(text_list: TextList, embedder: nn.Module, encoder: TextListEncoder) -> torch.Tensor:
    """One ``1 x L x D`` embedding for a text list."""
    stacked = stack_text_embeddings([text_list], embedder)
    return encoder(stacked)


def encode_image_list(image_list: ImageList, encoder: ImageListEncoder) -> torch.Tensor:
    """Spatial condition features ``1 x C x H/8 x W/8`` for an image list."""
    x = stack_image_lists([image_list]).to(next(encoder.parameters()).dtype)
    return encoder(x)
