"""Tiny transformer encoders for touch, vision and text, plus sensor tokens."""

from __future__ import annotations

import re
import zlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyText, ShapeMismatch, UnknownSensor
from .tokenizer import PatchConfig, PatchEmbed, TokenSequence

NORM_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    d: int = 64
    heads: int = 4
    pooling: str = "cls"
    embed_dim: int = 64
    n_sensor_tokens: int = 5
    mlp_ratio: float = 2.0
    text_vocab: int = 2048

    def __post_init__(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.pooling not in ("cls", "mean"):
            raise ValueError("pooling must be 'cls' or 'mean'")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingRecord:
    vector: np.ndarray
    modality: str
    sample_id: str = ""
    sensor: str = ""
    object_id: str = ""


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * hd ** -0.5, dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block, no dropout."""

    def __init__(self, d: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        hidden = int(d * mlp_ratio)
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Trunk(nn.Module):
    def __init__(self, d: int, heads: int, layers: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.blocks = nn.ModuleList([Block(d, heads, mlp_ratio) for _ in range(layers)])
        self.norm = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class SensorTokenBank(nn.Module):
    """K sensor-specific token sets plus one universal set, each (L, d)."""

    def __init__(self, sensor_names: Sequence[str], n_tokens: int, d: int):
        super().__init__()
        self.sensor_names = list(sensor_names)
        self.index = {n: i for i, n in enumerate(self.sensor_names)}
        self.specific = nn.Parameter(torch.randn(len(self.sensor_names), n_tokens, d) * 0.02)
        self.universal = nn.Parameter(torch.randn(n_tokens, d) * 0.02)

    @property
    def n_tokens(self) -> int:
        return self.universal.shape[0]

    def is_seen(self, sensor: str) -> bool:
        return sensor in self.index

    def draw(self, sensor: str, p_u: float, rng: np.random.Generator, *,
             unseen: bool = False) -> bool:
        """Bernoulli(p_u) choice of the universal set; unseen sensors always get it."""
        if sensor not in self.index:
            if unseen:
                return True
            raise UnknownSensor(sensor)
        # always consume one draw so the stream position does not depend on routing
        return bool(rng.random() < p_u)

    def tokens(self, sensors: Sequence[str], use_universal: Sequence[bool]) -> torch.Tensor:
        """(B, L, d) token sets for a batch."""
        rows = []
        for name, uni in zip(sensors, use_universal):
            if uni:
                rows.append(self.universal)
            elif name in self.index:
                rows.append(self.specific[self.index[name]])
            else:
                raise UnknownSensor(name)
        return torch.stack(rows)


def select_sensor_tokens(bank: SensorTokenBank, sensor: str, p_u: float, rng: np.random.Generator,
                         *, unseen: bool = False) -> tuple[torch.Tensor, bool]:
    used_universal = bank.draw(sensor, p_u, rng, unseen=unseen)
    return bank.tokens([sensor], [used_universal])[0], used_universal


class TouchEncoder(nn.Module):
    """Transformer over [cls, sensor tokens, media tokens] with a pooled projection."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.cls = nn.Parameter(torch.randn(1, 1, cfg.d) * 0.02)
        self.trunk = Trunk(cfg.d, cfg.heads, cfg.layers, cfg.mlp_ratio)
        self.proj = nn.Linear(cfg.d, cfg.embed_dim)

    def features(self, z: torch.Tensor, sensor_tokens: torch.Tensor | None) -> torch.Tensor:
        """Per-token trunk output for (B, N, d) tokens; sensor tokens (B, L, d) are prepended."""
        if z.ndim != 3 or z.shape[-1] != self.cfg.d:
            raise ShapeMismatch(f"tokens {tuple(z.shape)} do not have width {self.cfg.d}")
        parts = [self.cls.expand(z.shape[0], -1, -1)]
        if sensor_tokens is not None:
            if sensor_tokens.shape[0] != z.shape[0] or sensor_tokens.shape[-1] != self.cfg.d:
                raise ShapeMismatch(f"sensor tokens {tuple(sensor_tokens.shape)} do not fit {tuple(z.shape)}")
            parts.append(sensor_tokens)
        parts.append(z)
        return self.trunk(torch.cat(parts, dim=1))

    def pool(self, feats: torch.Tensor) -> torch.Tensor:
        pooled = feats[:, 0] if self.cfg.pooling == "cls" else feats[:, 1:].mean(dim=1)
        return l2_normalize(self.proj(pooled))

    def forward(self, z: torch.Tensor, sensor_tokens: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.features(z, sensor_tokens)
        return self.pool(feats), feats


def encode_touch(encoder: TouchEncoder, z: TokenSequence | torch.Tensor,
                 sensor_tokens: torch.Tensor, **provenance) -> tuple[EmbeddingRecord, torch.Tensor]:
    """Single-sample convenience wrapper: returns the record and (1+L+N, d) features."""
    tokens = z.tokens if isinstance(z, TokenSequence) else z
    with torch.no_grad():
        pooled, feats = encoder(tokens[None], sensor_tokens[None])
    rec = EmbeddingRecord(pooled[0].cpu().numpy(), "touch", **provenance)
    return rec, feats[0]


class VisionEncoder(nn.Module):
    """Same trunk design as the touch encoder, separate weights, single-frame input."""

    def __init__(self, patch: PatchConfig, cfg: EncoderConfig):
        super().__init__()
        self.patch_cfg = PatchConfig(p=patch.p, t_p=1, d=cfg.d, frames=1,
                                     height=patch.height, width=patch.width)
        self.embed = PatchEmbed(self.patch_cfg)
        self.encoder = TouchEncoder(cfg)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) -> (B, embed_dim) unit vectors."""
        z = self.embed(images[:, None])
        pooled, _ = self.encoder(z, None)
        return pooled


_WORD = re.compile(r"[a-z0-9]+")


def text_token_ids(text: str, vocab: int) -> list[int]:
    words = _WORD.findall(text.lower())
    return [zlib.crc32(w.encode("utf-8")) % vocab for w in words]


class TextEncoder(nn.Module):
    """Frozen hashed bag-of-words encoder: embedding table, mean pool, projection."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        self.vocab = cfg.text_vocab
        gen = torch.Generator().manual_seed(seed)
        self.table = nn.Parameter(torch.randn(cfg.text_vocab, cfg.d, generator=gen), requires_grad=False)
        self.proj = nn.Parameter(torch.randn(cfg.d, cfg.embed_dim, generator=gen) / cfg.d ** 0.5,
                                 requires_grad=False)

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        rows = []
        for t in texts:
            ids = text_token_ids(t, self.vocab)
            if not ids:
                raise EmptyText(f"text {t!r} has no tokens")
            rows.append(self.table[torch.tensor(ids)].mean(dim=0))
        return l2_normalize(torch.stack(rows) @ self.proj)


def encode_text(encoder: TextEncoder, text: str) -> EmbeddingRecord:
    with torch.no_grad():
        vec = encoder([text])[0]
    return EmbeddingRecord(vec.cpu().numpy(), "text")


def encode_vision(encoder: VisionEncoder, image: np.ndarray) -> EmbeddingRecord:
    x = torch.as_tensor(np.asarray(image), dtype=encoder.embed.proj.weight.dtype)
    if x.shape != (encoder.patch_cfg.height, encoder.patch_cfg.width, 3):
        raise ShapeMismatch(f"image shape {tuple(x.shape)} does not match config")
    with torch.no_grad():
        vec = encoder(x[None])[0]
    return EmbeddingRecord(vec.cpu().numpy(), "vision")
