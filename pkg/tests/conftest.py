import numpy as np
import pytest

from featsplat import _backend

BACKENDS = ["numpy"] + (["numba"] if _backend.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def each_backend(request):
    with _backend.backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
