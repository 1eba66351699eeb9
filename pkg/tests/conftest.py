import numpy as np
import pytest
import torch

from tactrep.config import RunConfig, TrainConfig
from tactrep.encoder import EncoderConfig
from tactrep.masked import DecoderConfig
from tactrep.synth import WorldSpec, generate_world
from tactrep.tokenizer import PatchConfig

SMALL_WORLD = dict(n_objects=4, n_positions_per_object=2, touches_per_position=3,
                   drop_vision=["digit"], drop_text=["duragel"])


def small_config(**train) -> RunConfig:
    """d=16, two-layer instance used for fast training and gradient checks."""
    return RunConfig(
        patch=PatchConfig(d=16),
        encoder=EncoderConfig(layers=2, d=16, heads=2, embed_dim=16),
        decoder=DecoderConfig(layers=1, d_dec=16, heads=2),
        train=TrainConfig(**{"epochs": 1, "batch_size": 8, **train}),
    )


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    return generate_world(WorldSpec(**SMALL_WORLD), root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
