import numpy as np
import pytest
import torch

from tip_micro import pipeline
from tip_micro.config import ModelConfig, RunConfig, TextConfig


@pytest.fixture(scope="session")
def tiny_config() -> RunConfig:
    """Small dims so model-level tests run in seconds."""
    cfg = RunConfig()
    cfg.model = ModelConfig(unet_base_width=16, ae_base_width=8, cond_channels=8, timesteps=100)
    cfg.text = TextConfig(max_tokens=16, embed_dim=32, num_layers=1, num_heads=2)
    return cfg


@pytest.fixture(scope="session")
def tiny_backbone(tiny_config):
    torch.manual_seed(0)
    return pipeline.new_backbone(tiny_config, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def rand_image(rng, h=64, w=64):
    return rng.random((h, w, 3)).astype(np.float32)
