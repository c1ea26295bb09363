import numpy as np
import pytest

from circuitvit.backbone import ModelConfig
from circuitvit.model_io import synthesize_weights

TINY = ModelConfig(
    num_layers=4,
    hidden_dim=16,
    num_heads=2,
    mlp_hidden_dim=32,
    patch_size=4,
    image_side=8,
    num_register_tokens=2,
)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_weights(tiny_config):
    return synthesize_weights(tiny_config, seed=0)


@pytest.fixture
def tiny_image(tiny_config):
    rng = np.random.default_rng(42)
    side = tiny_config.image_side
    return rng.normal(0.0, 1.0, size=(3, side, side)).astype(np.float32)
