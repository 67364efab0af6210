import numpy as np
import pytest

from dcaunet import tensor as T


@pytest.fixture(autouse=True)
def float64_default():
    """Keep every test in 64-bit verification mode unless it opts out."""
    previous = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    T.set_finite_checks(False)
    yield
    T.set_default_dtype(previous)
    T.set_finite_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
