import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dag(rng, d, prob=0.5, low=0.3, high=0.9):
    """Weighted DAG with random node order (independent of the package generator)."""
    mask = np.triu(rng.random((d, d)) < prob, k=1)
    w = mask * rng.uniform(low, high, (d, d)) * rng.choice([-1.0, 1.0], (d, d))
    perm = rng.permutation(d)
    return w[np.ix_(perm, perm)]
