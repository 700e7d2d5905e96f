import numpy as np
import pytest

from multiring import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numpy", "numba"])
def backend(request, monkeypatch):
    """Run a test under each kernel implementation."""
    monkeypatch.setattr(kernels, "BACKEND", request.param)
    return request.param
