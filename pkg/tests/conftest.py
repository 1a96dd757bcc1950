import numpy as np
import pytest
from hypothesis import settings

# Deterministic hypothesis runs so the suite never flakes in CI.
settings.register_profile("deterministic", derandomize=True, deadline=None, max_examples=60)
settings.load_profile("deterministic")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
