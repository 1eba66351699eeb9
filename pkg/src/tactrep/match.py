"""Cross-sensor matching: triplet sampling, elementwise-product scoring head, BCE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .data_model import Manifest
from .errors import DomainError, ShapeMismatch

EPS = 1e-7


@dataclass(frozen=True)
class MatchTriplet:
    anchor: str
    positive: str
    negative: str


class MatchHead(nn.Module):
    """embed_dim -> embed_dim (GELU) -> 1, logistic squash, clamped to [eps, 1-eps]."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(embed_dim, embed_dim), nn.GELU(), nn.Linear(embed_dim, 1))

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return match_score(x, y, self.mlp)


def match_score(x: torch.Tensor, y: torch.Tensor, mlp) -> torch.Tensor:
    """squash(mlp(x * y)); symmetric because the elementwise product commutes."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"embeddings {tuple(x.shape)} vs {tuple(y.shape)}")
    m = torch.sigmoid(mlp(x * y)).squeeze(-1)
    return m.clamp(EPS, 1.0 - EPS)


def match_loss(m_pos: torch.Tensor, m_neg: torch.Tensor) -> torch.Tensor:
    """Mean over triplets of -log(m+) - log(1 - m-)."""
    if not isinstance(m_pos, torch.Tensor):
        m_pos = torch.tensor(m_pos, dtype=torch.float64)
    m_neg = torch.as_tensor(m_neg, dtype=m_pos.dtype)
    if bool(((m_pos <= 0) | (m_pos >= 1) | (m_neg <= 0) | (m_neg >= 1)).any()):
        raise DomainError("matching scores must lie strictly inside (0, 1)")
    return (-torch.log(m_pos) - torch.log1p(-m_neg)).mean()


def sample_triplets(manifest: Manifest, anchors: Sequence[str], rng: np.random.Generator,
                    negative_pool: Sequence[str] | None = None) -> list[MatchTriplet]:
    """One triplet per anchor whose group holds another sensor.

    Positives come from the anchor's group with a different sensor. Negatives are
    uniform over ``negative_pool`` (default: whole manifest) restricted to samples
    at a different object or position; they may come from any sensor.
    """
    pool_ids = list(negative_pool) if negative_pool is not None else [s.id for s in manifest.samples]
    keys = np.array([f"{manifest.by_id[i].object_id}\x00{manifest.by_id[i].position_id}" for i in pool_ids])
    out = []
    for aid in anchors:
        a = manifest.by_id[aid]
        group = manifest.groups[a.group_id]
        positives = [m.id for m in group.members if m.sensor != a.sensor]
        if not positives:
            continue
        pos = positives[int(rng.integers(len(positives)))]
        valid = np.flatnonzero(keys != f"{a.object_id}\x00{a.position_id}")
        if valid.size == 0:
            continue
        neg = pool_ids[int(valid[rng.integers(valid.size)])]
        out.append(MatchTriplet(aid, pos, neg))
    return out


def triplet_is_valid(manifest: Manifest, t: MatchTriplet) -> bool:
    a, p, n = manifest.by_id[t.anchor], manifest.by_id[t.positive], manifest.by_id[t.negative]
    pos_ok = (a.object_id, a.position_id) == (p.object_id, p.position_id) and a.sensor != p.sensor
    neg_ok = (a.object_id, a.position_id) != (n.object_id, n.position_id)
    return pos_ok and neg_ok
