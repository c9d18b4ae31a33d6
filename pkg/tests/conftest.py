import numpy as np
import pytest

from carpet_studio import features, synthetic


@pytest.fixture(scope="session")
def models():
    """Shared stand-in model bundle (cached on disk after the first session)."""
    return features.load_models()


@pytest.fixture(scope="session")
def encoder(models):
    return models.encoder


@pytest.fixture()
def carpet64():
    return synthetic.make_carpet_map(seed=1, size=64)


@pytest.fixture()
def texture64():
    return synthetic.make_texture(seed=2, size=64)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
