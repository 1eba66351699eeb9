import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tactrep.errors import EmptyMask, MissingNextFrame
from tactrep.masked import (DEFAULT_MASK_RATIO, Stage1Batch, loss_pred_next, loss_rec, mask_count,
                            sample_mask, stage1_forward, stage1_loss)
from tactrep.model import TactileModel
from tactrep.tokenizer import PatchConfig

from conftest import small_config
from oracles import pred_loss, rec_loss


def test_paper_mask_count():
    assert DEFAULT_MASK_RATIO == 0.75
    assert mask_count(192, 0.75) == 144


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 300), rho=st.floats(0.0, 0.99), seed=st.integers(0, 10_000))
def test_mask_partition_law(n, rho, seed):
    m = sample_mask(n, rho, np.random.default_rng(seed))
    assert len(m.indices) == math.floor(rho * n)
    assert set(m.indices).isdisjoint(m.visible)
    assert sorted(list(m.indices) + list(m.visible)) == list(range(n))


def test_mask_ratio_bounds():
    with pytest.raises(ValueError):
        sample_mask(10, 1.0, np.random.default_rng(0))
    with pytest.raises(EmptyMask):
        cfg = PatchConfig()
        loss_rec(torch.zeros(3, 32, 32, 3), torch.zeros(192, 48), np.zeros(192, bool), cfg)


def test_rec_loss_three_tokens_oracle(rng):
    cfg = PatchConfig()
    media = rng.random((3, 32, 32, 3))
    recon = rng.random((192, 48))
    mask = np.zeros(192, bool)
    mask[[5, 70, 191]] = True
    got = float(loss_rec(torch.as_tensor(media), torch.as_tensor(recon), mask, cfg))
    assert abs(got - rec_loss(media, recon, mask, 4, 1)) < 1e-6


def test_pred_loss_oracle(rng):
    cfg = PatchConfig()
    frame = rng.random((32, 32, 3))
    pred = rng.random((64, 48))
    got = float(loss_pred_next(torch.as_tensor(frame), torch.as_tensor(pred), cfg))
    assert abs(got - pred_loss(frame, pred, 4)) < 1e-6
    with pytest.raises(MissingNextFrame):
        loss_pred_next(None, torch.as_tensor(pred), cfg)


def _video_batch(cfg, rng, b=2):
    n = cfg.patch.n_tokens
    masks = np.stack([sample_mask(n, 0.75, rng).as_bool() for _ in range(b)])
    return Stage1Batch(torch.rand(b, 3, 32, 32, 3), "video", [False, True][:b], ["digit"] * b, masks,
                       next_frame=torch.rand(b, 32, 32, 3))


def test_stage1_video_loss_is_component_sum(rng):
    cfg = small_config()
    model = TactileModel(cfg.patch, cfg.encoder, cfg.decoder, ["digit"])
    batch = _video_batch(cfg, rng)
    with torch.no_grad():
        parts = stage1_loss(model, batch)
        recon, pred = stage1_forward(model, batch)
    rec = loss_rec(batch.media, recon, batch.masks, cfg.patch)
    nxt = loss_pred_next(batch.next_frame, pred, cfg.patch)
    assert abs(float(parts["total"]) - float(rec + nxt)) < 1e-7
    # decoder sees every patch position plus one frame of next-frame queries
    assert model.decoder.last_input_len == cfg.patch.n_tokens + cfg.patch.tokens_per_frame


def test_stage1_image_loss_static_only(rng):
    cfg = small_config()
    model = TactileModel(cfg.patch, cfg.encoder, cfg.decoder, ["digit"])
    batch = _video_batch(cfg, rng)
    batch.kind, batch.next_frame = "image", None
    parts = stage1_loss(model, batch)
    assert set(parts) == {"total", "rec_static"}
    assert model.decoder.last_input_len == cfg.patch.n_tokens
