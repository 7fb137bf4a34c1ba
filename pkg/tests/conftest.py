import numpy as np
import pytest

from swinvos import engine


@pytest.fixture(autouse=True)
def finite_checks():
    prev = engine.set_finite_checks(True)
    yield
    engine.set_finite_checks(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
