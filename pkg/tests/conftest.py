import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ltgcd.store import generate_synthetic, split_labelled

settings.register_profile(
    "ltgcd", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("ltgcd")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def lt_split():
    """K=20, lambda=10 mixture with half the classes labelled."""
    emb, info = generate_synthetic(20, 32, 10, 200, 0, 0.08)
    return emb, split_labelled(info, 0.5, 0.5, 0)


@pytest.fixture(scope="session")
def four_clusters():
    emb, info = generate_synthetic(4, 16, 1, 60, 3, 0.05)
    return emb, info


@pytest.fixture(scope="session")
def trained(lt_split):
    from ltgcd.classifier import TrainConfig, train

    emb, info = lt_split
    return train(emb, info, TrainConfig(n_classes=20), seed=0)
