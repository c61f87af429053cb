"""Shared fixtures: a small synthetic dataset and model instances."""
import numpy as np
import pytest

from icssm.model import ICMambaModel, ModelConfig
from icssm.simulate import default_sim_config, simulate_dataset


@pytest.fixture(scope="session")
def small_dataset():
    cfg = default_sim_config()
    cfg.posts_per_opinion = 8
    cfg.posting_span = 5 * 86400.0
    posts, manifest = simulate_dataset(cfg, seed=42)
    return posts, manifest


@pytest.fixture(scope="session")
def small_model(small_dataset):
    _, manifest = small_dataset
    config = ModelConfig(n_opinions=len(manifest.opinions),
                         opinion_labels=list(manifest.opinions),
                         s_ref=manifest.s_ref)
    return ICMambaModel(config, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
