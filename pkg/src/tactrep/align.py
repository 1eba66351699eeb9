"""Touch-vision-language contrastive alignment tolerant of missing modalities.

Each direction is an InfoNCE over the largest index subset where both of its
modalities are present; directions with an empty subset are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import AllSubsetsEmpty, EmptySubset

DEFAULT_TAU = 0.07

# (name, anchor modality, target modality, weight attribute)
DIRECTIONS = (
    ("t2v", "touch", "vision", "alpha_tv"),
    ("v2t", "vision", "touch", "alpha_tv"),
    ("t2l", "touch", "text", "alpha_tl"),
    ("l2t", "text", "touch", "alpha_tl"),
    ("v2l", "vision", "text", "alpha_vl"),
    ("l2v", "text", "vision", "alpha_vl"),
)


@dataclass(frozen=True)
class AlignWeights:
    alpha_tv: float = 1.0
    alpha_tl: float = 1.0
    alpha_vl: float = 0.2
    tau: float = DEFAULT_TAU

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if min(self.alpha_tv, self.alpha_tl, self.alpha_vl) < 0:
            raise ValueError("alignment weights must be non-negative")


@dataclass
class AlignedBatch:
    """Touch rows are always present; vision/text rows are filled where ``has_*`` is set.

    Absent rows in ``x_v``/``x_l`` are ignored (any value, typically zeros).
    """

    x_t: torch.Tensor
    x_v: torch.Tensor
    x_l: torch.Tensor
    has_v: torch.Tensor
    has_l: torch.Tensor
    omega: dict[str, torch.Tensor] = field(init=False)

    def __post_init__(self) -> None:
        self.has_v = torch.as_tensor(self.has_v, dtype=torch.bool)
        self.has_l = torch.as_tensor(self.has_l, dtype=torch.bool)
        self.omega = {
            "touch": torch.ones(self.x_t.shape[0], dtype=torch.bool),
            "vision": self.has_v,
            "text": self.has_l,
        }

    def modality(self, name: str) -> torch.Tensor:
        return {"touch": self.x_t, "vision": self.x_v, "text": self.x_l}[name]

    def subset(self, a: str, b: str) -> torch.Tensor:
        return torch.nonzero(self.omega[a] & self.omega[b]).flatten()


def info_nce_directional(anchors: torch.Tensor, targets: torch.Tensor, tau: float,
                         subset: Sequence[int] | torch.Tensor | None = None) -> torch.Tensor:
    """-(1/|S|) sum_i log softmax_j(a_i . t_j / tau)[i], with i, j ranging over S."""
    if subset is not None:
        idx = torch.as_tensor(subset, dtype=torch.long)
        anchors, targets = anchors[idx], targets[idx]
    if anchors.shape[0] == 0:
        raise EmptySubset("no samples carry both modalities")
    logits = anchors @ targets.T / tau
    return -torch.log_softmax(logits, dim=1).diagonal().mean()


def directional_losses(batch: AlignedBatch, tau: float) -> dict[str, torch.Tensor | None]:
    out: dict[str, torch.Tensor | None] = {}
    for name, a, b, _ in DIRECTIONS:
        idx = batch.subset(a, b)
        if idx.numel() == 0:
            out[name] = None
            continue
        out[name] = info_nce_directional(batch.modality(a), batch.modality(b), tau, idx)
    return out


def align_loss(batch: AlignedBatch, w: AlignWeights = AlignWeights(),
               *, return_parts: bool = False):
    """Weighted half-sums of the paired directions; empty directions add zero."""
    parts = directional_losses(batch, w.tau)
    present = [v for v in parts.values() if v is not None]
    if not present:
        raise AllSubsetsEmpty("every modality pair has an empty index subset")
    total = present[0].new_zeros(())
    for name, _, _, weight_attr in DIRECTIONS:
        val = parts[name]
        if val is not None:
            total = total + getattr(w, weight_attr) / 2.0 * val
    return (total, parts) if return_parts else total
