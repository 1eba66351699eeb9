import csv

import numpy as np
import pytest
import torch

from tactrep.errors import NumericalDivergence, StageOrderError
from tactrep.trainer import (STAGE1_COLUMNS, MediaLoader, RngStreams, _check_finite, build_schedule,
                             make_stage2_batch, schedule_lr, schedule_pu, stage2_loss, train_stage1,
                             train_stage2, with_stage)
from tactrep.align import AlignedBatch, align_loss
from tactrep.match import match_loss
from tactrep.model import TactileModel

from conftest import small_config


def test_pu_schedule_endpoints():
    assert schedule_pu(0, 100) == 0.0
    assert schedule_pu(100, 100) == 0.75
    assert schedule_pu(50, 100) == pytest.approx(0.375)


def test_lr_schedule():
    assert schedule_lr(0, 10, 100) == 0.0
    assert schedule_lr(10, 10, 100) == pytest.approx(2e-4)
    assert schedule_lr(100, 10, 100) == pytest.approx(0.0)
    assert schedule_lr(55, 10, 100) == pytest.approx(1e-4)


def test_schedule_alternates_media(small_world):
    cfg = small_config()
    steps = build_schedule(small_world.subset(split="train"), cfg.train, 3)[0]
    kinds = [k for k, _ in steps]
    assert kinds[:4] == ["image", "video", "image", "video"]
    no_dyn = build_schedule(small_world.subset(split="train"), with_stage(cfg, 1, no_dynamic=True).train, 3)[0]
    assert {k for k, _ in no_dyn} == {"image"}


def test_stage1_run_deterministic_and_logged(small_world, tmp_path):
    cfg = small_config(unseen_sensors=("gelslim",))
    a = train_stage1(cfg, small_world, out_dir=tmp_path)
    b = train_stage1(cfg, small_world)
    assert all(torch.equal(a.model_state[k], b.model_state[k]) for k in a.model_state)
    assert a.sensors == ["digit", "duragel", "gelsight_mini"]
    with open(tmp_path / "loss_stage1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(STAGE1_COLUMNS) and len(rows) == a.step
    assert all(np.isfinite(float(r["loss_total"])) for r in rows)


def test_stage2_requires_stage1(small_world):
    cfg = with_stage(small_config(), 2)
    with pytest.raises(StageOrderError):
        train_stage2(cfg, small_world)


def test_stage2_keeps_text_frozen(small_world):
    cfg = small_config()
    s1 = train_stage1(cfg, small_world)
    s2 = train_stage2(with_stage(cfg, 2), small_world, s1)
    for k in ("text.table", "text.proj"):
        assert torch.equal(s1.model_state[k], s2.model_state[k])
    assert not torch.equal(s1.model_state["touch.cls"], s2.model_state["touch.cls"])
    parts = {r.keys().__len__() for r in s2.log}
    assert parts and all("align" in r or "match" in r for r in s2.log)


def test_stage2_loss_component_sum(small_world):
    cfg = with_stage(small_config(), 2)
    model = TactileModel(cfg.patch, cfg.encoder, cfg.decoder, sorted(small_world.sensors))
    data = small_world.subset(split="train")
    loader = MediaLoader(data, cfg.patch)
    ids = [s.id for s in data.samples[:8]]
    batch = make_stage2_batch(loader, ids, "video", 0.5, model, RngStreams.from_seed(0, 2), cfg.train,
                              [s.id for s in data.samples])
    with torch.no_grad():
        parts = stage2_loss(model, batch, cfg.train)
        emb = model.embed_touch(batch.media, batch.sensors, batch.universal)
        b, t = batch.n_anchor, len(batch.triplet_rows)
        x_t = emb[:b]
        x_v = torch.zeros_like(x_t)
        x_v[batch.has_v] = model.embed_vision(batch.vision)
        has_l = torch.tensor([s is not None for s in batch.texts])
        x_l = torch.zeros_like(x_t)
        x_l[has_l] = model.embed_text([s for s in batch.texts if s])
        align = align_loss(AlignedBatch(x_t, x_v, x_l, batch.has_v, has_l), cfg.train.align_weights())
        anchors = x_t[batch.triplet_rows]
        match = match_loss(model.match_head(anchors, emb[b:b + t]), model.match_head(anchors, emb[b + t:]))
    assert t > 0
    assert abs(float(parts["total"]) - float(align + 0.1 * match)) < 1e-6


def test_nan_aborts_with_diagnostics(tmp_path):
    with pytest.raises(NumericalDivergence) as err:
        _check_finite(torch.tensor(float("nan")), ["s1", "s2"], 7, tmp_path)
    assert err.value.batch_ids == ["s1", "s2"]
    assert "s1" in (tmp_path / "divergence.txt").read_text()
