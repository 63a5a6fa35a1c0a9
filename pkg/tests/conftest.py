import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from cesynth.data import PhantomSpec, phantom_cohort


@pytest.fixture(autouse=True, scope="session")
def sequential_blas():
    """Bit-exact comparisons assume single-threaded BLAS."""
    with threadpool_limits(1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(shape=(8, 32, 32), tumor_radius=(2.0, 3.0))


@pytest.fixture(scope="session")
def cohort():
    return phantom_cohort(3, seed=7)
