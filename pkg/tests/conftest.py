import numpy as np
import pytest

import helpers


@pytest.fixture(scope="session")
def tiny_weights():
    """One small random model shared by read-only tests."""
    return helpers.tiny_model(seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
