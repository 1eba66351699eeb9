"""Unified image/video input: time-axis replication and the shared patch projection.

Static images become F identical frames so one tokenizer serves both media
kinds. Tokens are laid out time-major, then row-major within a frame.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeMismatch


@dataclass(frozen=True)
class PatchConfig:
    p: int = 4
    t_p: int = 1
    d: int = 64
    frames: int = 3
    height: int = 32
    width: int = 32

    def __post_init__(self) -> None:
        if self.height % self.p or self.width % self.p:
            raise ShapeMismatch(f"image {self.height}x{self.width} not divisible by patch {self.p}")
        if self.frames % self.t_p:
            raise ShapeMismatch(f"{self.frames} frames not divisible by tubelet {self.t_p}")

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.frames // self.t_p, self.height // self.p, self.width // self.p

    @property
    def n_tokens(self) -> int:
        t, h, w = self.grid
        return t * h * w

    @property
    def tokens_per_frame(self) -> int:
        return (self.height // self.p) * (self.width // self.p)

    @property
    def tubelet_dim(self) -> int:
        return self.t_p * self.p * self.p * 3

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class MediaTensor:
    data: np.ndarray  # (F, H, W, 3) in [0, 1]
    kind: str  # "static" | "dynamic"


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (N, d) or (B, N, d)
    grid: tuple[int, int, int]


def image_to_media(image: np.ndarray, cfg: PatchConfig) -> MediaTensor:
    """Replicate a (H, W, 3) or (1, H, W, 3) image F times along time."""
    img = np.asarray(image)
    if img.ndim == 4 and img.shape[0] == 1:
        img = img[0]
    if img.shape != (cfg.height, cfg.width, 3):
        raise ShapeMismatch(f"image shape {img.shape} != {(cfg.height, cfg.width, 3)}")
    return MediaTensor(np.repeat(img[None], cfg.frames, axis=0), "static")


def video_to_media(clip: np.ndarray, cfg: PatchConfig) -> MediaTensor:
    clip = np.asarray(clip)
    if clip.shape != (cfg.frames, cfg.height, cfg.width, 3):
        raise ShapeMismatch(f"clip shape {clip.shape} != {(cfg.frames, cfg.height, cfg.width, 3)}")
    return MediaTensor(clip, "dynamic")


def flatten_tubelets(x: torch.Tensor, cfg: PatchConfig) -> torch.Tensor:
    """(..., F, H, W, 3) -> (..., N, t_p*p*p*3), time-major then row-major."""
    lead = x.shape[:-4]
    f, h, w, c = x.shape[-4:]
    if (f, h, w, c) != (cfg.frames, cfg.height, cfg.width, 3):
        raise ShapeMismatch(f"media shape {(f, h, w, c)} does not match config")
    tg, hg, wg = cfg.grid
    x = x.reshape(*lead, tg, cfg.t_p, hg, cfg.p, wg, cfg.p, 3)
    nl = len(lead)
    perm = list(range(nl)) + [nl + i for i in (0, 2, 4, 1, 3, 5, 6)]
    x = x.permute(*perm)
    return x.reshape(*lead, tg * hg * wg, cfg.tubelet_dim)


def unpatchify(pixel_tokens: torch.Tensor, cfg: PatchConfig) -> torch.Tensor:
    """Exact inverse of :func:`flatten_tubelets`."""
    lead = pixel_tokens.shape[:-2]
    n, dim = pixel_tokens.shape[-2:]
    if n != cfg.n_tokens or dim != cfg.tubelet_dim:
        raise ShapeMismatch(f"token matrix {(n, dim)} != {(cfg.n_tokens, cfg.tubelet_dim)}")
    tg, hg, wg = cfg.grid
    x = pixel_tokens.reshape(*lead, tg, hg, wg, cfg.t_p, cfg.p, cfg.p, 3)
    nl = len(lead)
    perm = list(range(nl)) + [nl + i for i in (0, 3, 1, 4, 2, 5, 6)]
    x = x.permute(*perm)
    return x.reshape(*lead, cfg.frames, cfg.height, cfg.width, 3)


class PatchEmbed(nn.Module):
    """Shared linear tubelet projection plus factorized learned positions."""

    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg
        tg, hg, wg = cfg.grid
        self.proj = nn.Linear(cfg.tubelet_dim, cfg.d)
        self.pos_spatial = nn.Parameter(torch.randn(hg * wg, cfg.d) * 0.02)
        self.pos_temporal = nn.Parameter(torch.randn(tg, cfg.d) * 0.02)

    def positions(self) -> torch.Tensor:
        """(N, d) positional table: temporal row + spatial row per token."""
        tg = self.cfg.grid[0]
        return (self.pos_temporal[:, None, :] + self.pos_spatial[None, :, :]).reshape(
            tg * self.pos_spatial.shape[0], -1)

    def forward(self, media: torch.Tensor) -> torch.Tensor:
        return self.proj(flatten_tubelets(media, self.cfg)) + self.positions()


def patchify(m: MediaTensor | np.ndarray | torch.Tensor, cfg: PatchConfig,
             projection: PatchEmbed) -> TokenSequence:
    data = m.data if isinstance(m, MediaTensor) else m
    x = torch.as_tensor(np.asarray(data) if not isinstance(data, torch.Tensor) else data,
                        dtype=projection.proj.weight.dtype)
    return TokenSequence(projection(x), cfg.grid)
