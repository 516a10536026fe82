import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("aeda", deadline=None, max_examples=60)
settings.load_profile("aeda")


@pytest.fixture(scope="session")
def source_cache():
    """Trained source stages shared by every test that runs full experiments."""
    return {}


@pytest.fixture(scope="session")
def run_memo():
    """Finished runs shared between protocols that repeat the same job."""
    return {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
