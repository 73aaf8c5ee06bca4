import numpy as np
import pytest

from avss import tensor as T


@pytest.fixture(autouse=True)
def float64_mode():
    """Tests run at 64-bit unless they opt into 32-bit themselves."""
    prev = T.default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
