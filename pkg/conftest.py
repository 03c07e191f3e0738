import hypothesis
import numpy as np
import pytest

from ppap_model import ModelConfig
from soundscape_dataset import generate_synthetic_dataset

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mini_config():
    return ModelConfig.miniature()


@pytest.fixture(scope="session")
def synthetic_manifest(mini_config):
    return generate_synthetic_dataset(40, seed=11, config=mini_config)


@pytest.fixture(scope="session")
def synthetic_samples(synthetic_manifest):
    return synthetic_manifest.samples()
