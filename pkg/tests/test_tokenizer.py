import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tactrep.errors import ShapeMismatch
from tactrep.tokenizer import (PatchConfig, PatchEmbed, flatten_tubelets, image_to_media, patchify,
                               unpatchify, video_to_media)

from oracles import tubelet


def test_defaults():
    cfg = PatchConfig()
    assert cfg.frames == 3
    assert cfg.grid == (3, 8, 8) and cfg.n_tokens == 192 and cfg.tubelet_dim == 48


def test_image_replicated_along_time():
    cfg = PatchConfig()
    img = np.random.default_rng(0).random((32, 32, 3))
    m = image_to_media(img, cfg)
    assert m.data.shape == (3, 32, 32, 3) and m.kind == "static"
    assert all(np.array_equal(m.data[t], img) for t in range(3))
    with pytest.raises(ShapeMismatch):
        image_to_media(np.zeros((16, 32, 3)), cfg)
    with pytest.raises(ShapeMismatch):
        video_to_media(np.zeros((2, 32, 32, 3)), cfg)


def test_one_pixel_patches_identity_projection():
    cfg = PatchConfig(p=1, t_p=1, d=3, frames=2, height=3, width=4)
    emb = PatchEmbed(cfg)
    with torch.no_grad():
        emb.proj.weight.copy_(torch.eye(3))
        emb.proj.bias.zero_()
        emb.pos_spatial.zero_()
        emb.pos_temporal.zero_()
    x = np.random.default_rng(1).random((2, 3, 4, 3)).astype(np.float32)
    toks = patchify(x, cfg, emb).tokens.detach().numpy()
    n = 0
    for t in range(2):
        for r in range(3):
            for c in range(4):
                for ch in range(3):
                    assert toks[n, ch] == x[t, r, c, ch]
                n += 1


def test_flatten_matches_scalar_walk():
    cfg = PatchConfig(p=2, t_p=1, frames=2, height=4, width=6)
    x = np.random.default_rng(2).random((2, 4, 6, 3))
    flat = flatten_tubelets(torch.as_tensor(x), cfg).numpy()
    for n in range(cfg.n_tokens):
        assert np.array_equal(flat[n], tubelet(x, n, 2, 1))


@settings(max_examples=25, deadline=None)
@given(p=st.sampled_from([1, 2, 4]), t_p=st.sampled_from([1, 3]), b=st.integers(1, 3),
       seed=st.integers(0, 1000))
def test_round_trip_exact(p, t_p, b, seed):
    cfg = PatchConfig(p=p, t_p=t_p, frames=3, height=8, width=8)
    x = torch.as_tensor(np.random.default_rng(seed).random((b, 3, 8, 8, 3)))
    back = unpatchify(flatten_tubelets(x, cfg), cfg)
    assert torch.equal(back, x)


def test_positions_factorized():
    cfg = PatchConfig()
    emb = PatchEmbed(cfg)
    pos = emb.positions()
    assert pos.shape == (192, cfg.d)
    assert torch.allclose(pos[64 + 5], emb.pos_temporal[1] + emb.pos_spatial[5])
