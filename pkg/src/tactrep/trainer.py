"""Two-stage training: masked modeling, then alignment plus cross-sensor matching."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .align import AlignedBatch, align_loss, DIRECTIONS
from .checkpoint import Checkpoint
from .config import RunConfig, TrainConfig
from .data_model import FrameStore, Manifest, NoEligibleSamples, make_batches
from .errors import AllSubsetsEmpty, NumericalDivergence, StageOrderError
from .masked import Stage1Batch, sample_mask, stage1_loss
from .match import match_loss, sample_triplets
from .model import TactileModel
from .tokenizer import PatchConfig

log = logging.getLogger(__name__)

STAGE1_COLUMNS = ["step", "stage", "loss_total", "rec_static", "rec_dynamic", "pred_next", "lr", "p_u"]
STAGE2_COLUMNS = ["step", "stage", "loss_total", "align", "match",
                  *[d[0] for d in DIRECTIONS], "lr", "p_u"]


def schedule_pu(step: int, total_steps: int, p_u_max: float = 0.75) -> float:
    """Linear ramp of the universal-token probability from 0 to ``p_u_max``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    step = min(max(step, 0), total_steps)
    return p_u_max * step / total_steps


def schedule_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float = 2e-4) -> float:
    """Linear warm-up to ``base_lr`` then linear decay to zero at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    remaining = total_steps - warmup_steps
    return base_lr * max(0.0, (total_steps - step) / remaining)


class MediaLoader:
    """Turns sample ids into model-ready tensors."""

    def __init__(self, manifest: Manifest, patch: PatchConfig, store: FrameStore | None = None):
        self.manifest = manifest
        self.patch = patch
        self.store = store or FrameStore(manifest.root)

    def media(self, ids: Sequence[str], kind: str) -> torch.Tensor:
        f = self.patch.frames
        rows = []
        for i in ids:
            s = self.manifest.by_id[i]
            if kind == "image":
                rows.append(np.repeat(self.store.image(s, f)[None], f, axis=0))
            else:
                rows.append(self.store.clip(s, f)[:f])
        return torch.from_numpy(np.stack(rows))

    def next_frames(self, ids: Sequence[str]) -> torch.Tensor:
        f = self.patch.frames
        return torch.from_numpy(np.stack([self.store.frame(self.manifest.by_id[i].frames[f]) for i in ids]))

    def vision(self, ids: Sequence[str]) -> tuple[torch.Tensor | None, torch.Tensor]:
        has = torch.tensor([self.manifest.by_id[i].vision is not None for i in ids])
        imgs = [self.store.vision(self.manifest.by_id[i]) for i in ids if self.manifest.by_id[i].vision]
        return (torch.from_numpy(np.stack(imgs)) if imgs else None), has

    def texts(self, ids: Sequence[str]) -> list[str | None]:
        return [self.manifest.by_id[i].text for i in ids]


@dataclass
class RngStreams:
    """Independent generators so one consumer can never perturb another."""

    tokens: np.random.Generator
    masks: np.random.Generator
    triplets: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, stage: int) -> "RngStreams":
        ss = np.random.SeedSequence([seed, stage])
        a, b, c = ss.spawn(3)
        return cls(np.random.default_rng(a), np.random.default_rng(b), np.random.default_rng(c))


def training_view(manifest: Manifest, train: TrainConfig) -> tuple[Manifest, list[str]]:
    """Train-split samples of seen sensors, and the sorted seen-sensor list."""
    unseen = set(train.unseen_sensors)
    seen = sorted(n for n in manifest.sensors if n not in unseen)
    return manifest.subset(split="train", sensors=seen), seen


def build_schedule(manifest: Manifest, train: TrainConfig, frames: int) -> list[list[tuple[str, list[str]]]]:
    """Per-epoch ordered (media kind, batch ids) lists."""
    epochs = []
    for e in range(train.epochs):
        img = make_batches(manifest, "train", "image", train.batch_size, train.seed * 1_000_003 + 2 * e,
                           frames=frames)
        vid: list[list[str]] = []
        if not train.no_dynamic:
            try:
                vid = make_batches(manifest, "train", "video", train.batch_size,
                                   train.seed * 1_000_003 + 2 * e + 1, frames=frames)
            except NoEligibleSamples:
                vid = []
        if train.alternation == "epoch" and vid:
            steps = [("image", b) for b in img] if e % 2 == 0 else [("video", b) for b in vid]
        else:
            steps = []
            for k in range(max(len(img), len(vid))):
                if k < len(img):
                    steps.append(("image", img[k]))
                if k < len(vid):
                    steps.append(("video", vid[k]))
        epochs.append(steps)
    return epochs


def _make_optimizer(model: TactileModel, stage: int, train: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.param_groups(stage, train.weight_decay), lr=train.base_lr,
                             betas=(0.9, 0.999), eps=1e-8)


def _check_finite(loss: torch.Tensor, ids: Sequence[str], step: int, out_dir: Path | None) -> None:
    if torch.isfinite(loss):
        return
    msg = f"non-finite loss at step {step}; batch ids: {', '.join(ids)}"
    log.error(msg)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "divergence.txt").write_text(msg + "\n", encoding="utf-8")
    raise NumericalDivergence(msg, list(ids))


def _fmt(v) -> str | float | int:
    if isinstance(v, torch.Tensor):
        v = float(v.detach())
    return v


def write_loss_log(rows: list[dict], path: str | Path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), restval="", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


def epoch_means(rows: list[dict], epoch_lengths: Sequence[int]) -> list[float]:
    out, i = [], 0
    for n in epoch_lengths:
        out.append(float(np.mean([r["loss_total"] for r in rows[i:i + n]])))
        i += n
    return out


# ------------------------------------------------------------------ stage 1


def make_stage1_batch(loader: MediaLoader, ids: list[str], kind: str, p_u: float,
                      model: TactileModel, rngs: RngStreams, mask_ratio: float) -> Stage1Batch:
    sensors = [loader.manifest.by_id[i].sensor for i in ids]
    universal = [model.sensor_bank.draw(s, p_u, rngs.tokens) for s in sensors]
    n = loader.patch.n_tokens
    masks = np.stack([sample_mask(n, mask_ratio, rngs.masks).as_bool() for _ in ids])
    return Stage1Batch(
        media=loader.media(ids, kind),
        kind=kind,
        sensor_tokens_universal=universal,
        sensors=sensors,
        masks=masks,
        next_frame=loader.next_frames(ids) if kind == "video" else None,
        ids=list(ids),
    )


def train_stage1(config: RunConfig, manifest: Manifest, *, out_dir: str | Path | None = None,
                 progress: Callable[[str], None] | None = None) -> Checkpoint:
    train = config.train
    out = Path(out_dir) if out_dir is not None else None
    data, seen = training_view(manifest, train)
    if not data.samples:
        raise NoEligibleSamples("no training samples for the seen sensors")
    model = TactileModel(config.patch, config.encoder, config.decoder, seen, seed=train.seed)
    model.train()
    opt = _make_optimizer(model, 1, train)
    loader = MediaLoader(data, config.patch)
    rngs = RngStreams.from_seed(train.seed, 1)
    schedule = build_schedule(data, train, config.patch.frames)
    total = sum(len(e) for e in schedule)
    warmup = train.warmup_epochs * len(schedule[0]) if schedule else 0
    warmup = min(warmup, total - 1)
    rows: list[dict] = []
    step = 0
    for epoch, steps in enumerate(schedule):
        for kind, ids in steps:
            p_u = 0.0 if train.no_universal_tokens else schedule_pu(step, total, train.p_u_max)
            lr = schedule_lr(step, warmup, total, train.base_lr)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = make_stage1_batch(loader, ids, kind, p_u, model, rngs, train.mask_ratio)
            parts = stage1_loss(model, batch)
            _check_finite(parts["total"], ids, step, out)
            opt.zero_grad(set_to_none=True)
            parts["total"].backward()
            opt.step()
            rows.append({"step": step, "stage": 1, "loss_total": _fmt(parts["total"]),
                         **{k: _fmt(v) for k, v in parts.items() if k != "total"}, "lr": lr, "p_u": p_u})
            step += 1
        if progress:
            progress(f"stage 1 epoch {epoch + 1}/{len(schedule)} mean loss "
                     f"{np.mean([r['loss_total'] for r in rows[-len(steps):]]):.5f}")
    lengths = [len(e) for e in schedule]
    ckpt = Checkpoint(config, seen, 1, step, {k: v.detach().clone() for k, v in model.state_dict().items()},
                      opt.state_dict(), extra={"epoch_losses": epoch_means(rows, lengths),
                                               "config_hash": config.config_hash()})
    ckpt.log = rows
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_loss_log(rows, out / "loss_stage1.csv", STAGE1_COLUMNS)
    return ckpt


# ------------------------------------------------------------------ stage 2


@dataclass
class Stage2Batch:
    media: torch.Tensor  # (B + 2T, F, H, W, 3): anchors, then positives, then negatives
    sensors: list[str]
    universal: list[bool]
    n_anchor: int
    vision: torch.Tensor | None  # (V, H, W, 3) for rows flagged in has_v
    has_v: torch.Tensor
    texts: list[str | None]
    triplet_rows: list[int]  # anchor row of each triplet
    ids: list[str]


def make_stage2_batch(loader: MediaLoader, ids: list[str], kind: str, p_u: float, model: TactileModel,
                      rngs: RngStreams, train: TrainConfig, pool: Sequence[str]) -> Stage2Batch:
    man = loader.manifest
    triplets = []
    if not train.no_match and train.match_weight > 0:
        triplets = sample_triplets(man, ids, rngs.triplets, negative_pool=pool)
    row_of = {a: k for k, a in enumerate(ids)}
    all_ids = list(ids) + [t.positive for t in triplets] + [t.negative for t in triplets]
    sensors = [man.by_id[i].sensor for i in all_ids]
    universal = [model.sensor_bank.draw(s, p_u, rngs.tokens) for s in sensors]
    if train.no_vision:
        vision, has_v = None, torch.zeros(len(ids), dtype=torch.bool)
    else:
        vision, has_v = loader.vision(ids)
    texts = [None] * len(ids) if train.no_text else loader.texts(ids)
    return Stage2Batch(loader.media(all_ids, kind), sensors, universal, len(ids), vision, has_v,
                       texts, [row_of[t.anchor] for t in triplets], all_ids)


def stage2_loss(model: TactileModel, batch: Stage2Batch, train: TrainConfig) -> dict[str, torch.Tensor]:
    """align + lambda * match; directions and the match term drop out when their inputs are absent."""
    emb = model.embed_touch(batch.media, batch.sensors, batch.universal)
    b = batch.n_anchor
    x_t = emb[:b]
    x_v = x_t.new_zeros(x_t.shape)
    if batch.vision is not None:
        x_v = x_v.index_copy(0, torch.nonzero(batch.has_v).flatten(), model.embed_vision(batch.vision))
    has_l = torch.tensor([t is not None for t in batch.texts])
    x_l = x_t.new_zeros(x_t.shape)
    if bool(has_l.any()):
        with torch.no_grad():
            txt = model.embed_text([t for t in batch.texts if t is not None])
        x_l = x_l.index_copy(0, torch.nonzero(has_l).flatten(), txt)
    aligned = AlignedBatch(x_t, x_v, x_l, batch.has_v, has_l)
    out: dict[str, torch.Tensor] = {}
    try:
        align, parts = align_loss(aligned, train.align_weights(), return_parts=True)
        out.update({k: v for k, v in parts.items() if v is not None})
    except AllSubsetsEmpty:
        align = None
    n_trip = len(batch.triplet_rows)
    match = None
    if n_trip:
        anchors = x_t[torch.tensor(batch.triplet_rows)]
        pos = emb[b:b + n_trip]
        neg = emb[b + n_trip:b + 2 * n_trip]
        m_pos = model.match_head(anchors, pos)
        m_neg = model.match_head(anchors, neg)
        match = match_loss(m_pos, m_neg)
    if align is None and match is None:
        raise AllSubsetsEmpty("batch has neither paired modalities nor matching triplets")
    total = x_t.new_zeros(())
    if align is not None:
        total = total + align
        out["align"] = align
    if match is not None:
        total = total + train.match_weight * match
        out["match"] = match
    out["total"] = total
    return out


def train_stage2(config: RunConfig, manifest: Manifest, init: Checkpoint | None = None, *,
                 out_dir: str | Path | None = None,
                 progress: Callable[[str], None] | None = None) -> Checkpoint:
    train = config.train
    out = Path(out_dir) if out_dir is not None else None
    if init is None and not train.from_scratch:
        raise StageOrderError("stage 2 continues from a stage-1 checkpoint; pass one or set from_scratch "
                              "(two-stage paradigm: masked modeling first, then alignment and matching)")
    data, seen = training_view(manifest, train)
    if not data.samples:
        raise NoEligibleSamples("no training samples for the seen sensors")
    model = TactileModel(config.patch, config.encoder, config.decoder, seen, seed=train.seed)
    if init is not None:
        init.check_compatible(config, seen)
        model.load_state_dict(init.model_state)
    model.train()
    opt = _make_optimizer(model, 2, train)
    loader = MediaLoader(data, config.patch)
    rngs = RngStreams.from_seed(train.seed, 2)
    schedule = build_schedule(data, train, config.patch.frames)
    total = sum(len(e) for e in schedule)
    warmup = min(train.warmup_epochs * len(schedule[0]) if schedule else 0, total - 1)
    pool = [s.id for s in data.samples]
    rows: list[dict] = []
    step = 0
    for epoch, steps in enumerate(schedule):
        for kind, ids in steps:
            p_u = 0.0 if train.no_universal_tokens else schedule_pu(step, total, train.p_u_max)
            lr = schedule_lr(step, warmup, total, train.base_lr)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = make_stage2_batch(loader, ids, kind, p_u, model, rngs, train, pool)
            parts = stage2_loss(model, batch, train)
            _check_finite(parts["total"], ids, step, out)
            opt.zero_grad(set_to_none=True)
            parts["total"].backward()
            opt.step()
            rows.append({"step": step, "stage": 2, "loss_total": _fmt(parts["total"]),
                         **{k: _fmt(v) for k, v in parts.items() if k != "total"}, "lr": lr, "p_u": p_u})
            step += 1
        if progress:
            progress(f"stage 2 epoch {epoch + 1}/{len(schedule)} mean loss "
                     f"{np.mean([r['loss_total'] for r in rows[-len(steps):]]):.5f}")
    lengths = [len(e) for e in schedule]
    ckpt = Checkpoint(config, seen, 2, step, {k: v.detach().clone() for k, v in model.state_dict().items()},
                      opt.state_dict(), extra={"epoch_losses": epoch_means(rows, lengths),
                                               "config_hash": config.config_hash(),
                                               "init_config_hash": init.config_hash if init else None})
    ckpt.log = rows
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_loss_log(rows, out / "loss_stage2.csv", STAGE2_COLUMNS)
    return ckpt


def with_stage(config: RunConfig, stage: int, **train_overrides) -> RunConfig:
    return replace(config, train=replace(config.train, stage=stage, **train_overrides))
