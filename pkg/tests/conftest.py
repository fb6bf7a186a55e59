import numpy as np
import pytest

from fairssvae import kernels
from fairssvae.data import MaskSpec, SyntheticSpec, apply_mask, generate_synthetic, split, standardize


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    """Each kernel implementation (numpy and, when built, the compiled one)."""
    return kernels.available_backends()[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synthetic():
    ds = generate_synthetic(SyntheticSpec(n=600, seed=3))
    masked = apply_mask(ds, MaskSpec.preset("medium", seed=3))
    return standardize(*split(masked, seed=3))
