"""Stage-1 objectives: masked reconstruction and next-frame prediction."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING

import numpy as np
import torch
import torch.nn as nn

from .encoder import Trunk
from .errors import EmptyMask, MissingNextFrame, ShapeMismatch
from .tokenizer import MediaTensor, PatchConfig, flatten_tubelets

if TYPE_CHECKING:
    from .model import TactileModel

DEFAULT_MASK_RATIO = 0.75


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    d_dec: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MaskSet:
    indices: np.ndarray  # sorted masked token indices
    rho: float
    n: int

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.n, dtype=bool)
        keep[self.indices] = False
        return np.flatnonzero(keep)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=bool)
        out[self.indices] = True
        return out


def mask_count(n: int, rho: float) -> int:
    return int(math.floor(rho * n))


def sample_mask(n: int, rho: float, rng: np.random.Generator) -> MaskSet:
    """Uniformly choose floor(rho * n) of n tokens without replacement."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {rho}")
    k = mask_count(n, rho)
    idx = np.sort(rng.permutation(n)[:k])
    return MaskSet(idx, rho, n)


class MaskedDecoder(nn.Module):
    """Lightweight decoder over visible features, mask queries and next-frame queries."""

    def __init__(self, patch: PatchConfig, enc_dim: int, cfg: DecoderConfig):
        super().__init__()
        self.patch = patch
        self.cfg = cfg
        tg, hg, wg = patch.grid
        self.embed = nn.Linear(enc_dim, cfg.d_dec)
        self.mask_token = nn.Parameter(torch.randn(cfg.d_dec) * 0.02)
        self.pos_spatial = nn.Parameter(torch.randn(hg * wg, cfg.d_dec) * 0.02)
        self.pos_temporal = nn.Parameter(torch.randn(tg, cfg.d_dec) * 0.02)
        self.next_temporal = nn.Parameter(torch.randn(cfg.d_dec) * 0.02)
        self.trunk = Trunk(cfg.d_dec, cfg.heads, cfg.layers, cfg.mlp_ratio)
        self.head = nn.Linear(cfg.d_dec, patch.tubelet_dim)
        self.last_input_len = 0

    def positions(self) -> torch.Tensor:
        tg = self.patch.grid[0]
        return (self.pos_temporal[:, None] + self.pos_spatial[None]).reshape(tg * self.pos_spatial.shape[0], -1)

    def forward(self, visible_feats: torch.Tensor, visible_idx: torch.Tensor,
                with_next: bool) -> tuple[torch.Tensor, torch.Tensor | None]:
        """visible_feats (B, Nv, enc_dim) at token indices visible_idx (B, Nv).

        Returns reconstructed pixel tokens (B, N, tubelet_dim) and, when
        ``with_next``, predicted next-frame tokens (B, N_frame, p*p*3).
        """
        b, nv, _ = visible_feats.shape
        n = self.patch.n_tokens
        vis = self.embed(visible_feats)
        full = self.mask_token.expand(b, n, -1).clone()
        full = full.scatter(1, visible_idx[..., None].expand(-1, -1, vis.shape[-1]), vis)
        seq = full + self.positions()
        if with_next:
            nxt = (self.mask_token + self.next_temporal + self.pos_spatial).expand(b, -1, -1)
            seq = torch.cat([seq, nxt], dim=1)
        self.last_input_len = seq.shape[1]
        out = self.head(self.trunk(seq))
        if not with_next:
            return out, None
        return out[:, :n], out[:, n:]


def _as_mask_tensor(mask, n: int) -> torch.Tensor:
    if isinstance(mask, MaskSet):
        m = torch.as_tensor(mask.as_bool())
    else:
        m = torch.as_tensor(mask)
    if m.shape[-1] != n:
        raise ShapeMismatch(f"mask covers {m.shape[-1]} tokens, expected {n}")
    return m.bool()


def loss_rec(original, reconstructed: torch.Tensor, mask, cfg: PatchConfig) -> torch.Tensor:
    """Mean over masked tokens of the per-token mean squared pixel error.

    ``original`` is a MediaTensor or a (..., F, H, W, 3) tensor; ``reconstructed``
    is (..., N, tubelet_dim); ``mask`` a MaskSet or (..., N) bool. Batched
    inputs are averaged over the batch after the per-sample mean.
    """
    data = original.data if isinstance(original, MediaTensor) else original
    target = flatten_tubelets(torch.as_tensor(data, dtype=reconstructed.dtype), cfg)
    if target.shape != reconstructed.shape:
        raise ShapeMismatch(f"reconstruction {tuple(reconstructed.shape)} vs target {tuple(target.shape)}")
    m = _as_mask_tensor(mask, cfg.n_tokens).to(reconstructed.dtype)
    counts = m.sum(dim=-1)
    if bool((counts == 0).any()):
        raise EmptyMask("reconstruction loss needs at least one masked token")
    per_token = ((reconstructed - target) ** 2).mean(dim=-1)
    return ((per_token * m).sum(dim=-1) / counts).mean()


def frame_tokens(frame: torch.Tensor, cfg: PatchConfig) -> torch.Tensor:
    """(..., H, W, 3) -> (..., N_frame, p*p*3) with the same row-major layout."""
    one = PatchConfig(p=cfg.p, t_p=1, d=cfg.d, frames=1, height=cfg.height, width=cfg.width)
    return flatten_tubelets(frame[..., None, :, :, :], one)


def loss_pred_next(target, predicted: torch.Tensor, cfg: PatchConfig) -> torch.Tensor:
    """Mean over the frame's tokens of the per-token mean squared pixel error."""
    if target is None:
        raise MissingNextFrame("sample has no frame after the clip")
    tgt = frame_tokens(torch.as_tensor(np.asarray(target) if not isinstance(target, torch.Tensor) else target,
                                       dtype=predicted.dtype), cfg)
    if tgt.shape != predicted.shape:
        raise ShapeMismatch(f"prediction {tuple(predicted.shape)} vs target {tuple(tgt.shape)}")
    return ((predicted - tgt) ** 2).mean(dim=-1).mean()


@dataclass
class Stage1Batch:
    media: torch.Tensor  # (B, F, H, W, 3)
    kind: str  # "image" | "video"
    sensor_tokens_universal: list[bool]
    sensors: list[str]
    masks: np.ndarray  # (B, N) bool
    next_frame: torch.Tensor | None = None  # (B, H, W, 3), video only
    ids: list[str] | None = None


def stage1_forward(model: "TactileModel", batch: Stage1Batch):
    """Encoder over visible + sensor tokens, then the decoder. Returns (recon, pred)."""
    masks = torch.as_tensor(batch.masks)
    b, n = masks.shape
    nv = int((~masks[0]).sum())
    if bool(((~masks).sum(dim=1) != nv).any()):
        raise ShapeMismatch("every sample in a batch needs the same visible count")
    vis_idx = torch.nonzero(~masks)[:, 1].reshape(b, nv)
    z = model.patch_embed(batch.media)
    z_vis = torch.gather(z, 1, vis_idx[..., None].expand(-1, -1, z.shape[-1]))
    s = model.sensor_bank.tokens(batch.sensors, batch.sensor_tokens_universal)
    feats = model.touch.features(z_vis, s)
    # drop cls and sensor positions; the decoder sees patch positions only
    vis_feats = feats[:, feats.shape[1] - nv:]
    return model.decoder(vis_feats, vis_idx, with_next=batch.kind == "video")


def stage1_loss(model: "TactileModel", batch: Stage1Batch) -> dict[str, torch.Tensor]:
    """Image batches: static reconstruction only. Video: reconstruction + next frame."""
    recon, pred = stage1_forward(model, batch)
    cfg = model.patch_cfg
    rec = loss_rec(batch.media, recon, batch.masks, cfg)
    if batch.kind == "image":
        return {"total": rec, "rec_static": rec}
    if batch.next_frame is None:
        raise MissingNextFrame("video batch without next-frame targets")
    nxt = loss_pred_next(batch.next_frame, pred, cfg)
    return {"total": rec + nxt, "rec_dynamic": rec, "pred_next": nxt}
