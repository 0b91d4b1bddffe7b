import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ucdr.data import GeneratorConfig, build_dataset, make_splits
from ucdr.model import ModelConfig
from ucdr.train import TrainConfig

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# a scaled-down world that still exercises every code path quickly
SMALL_GEN = GeneratorConfig(num_classes=6, num_domains=4, tokens=4, token_dim=16, samples_per_cell=10, seed=0)
SMALL_MODEL = ModelConfig(tokens=4, input_dim=16, embed_dim=8, text_dim=8, context_len=2, layers=1, heads=2,
                          prompt_dim=4, feature_dim=8, key_dim=4)


def small_train(phase: int, **kw) -> TrainConfig:
    base = dict(phase=phase, batch_size=16, max_epochs=3, early_stop_patience=5, lr_decay_epochs=3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_world():
    ds = build_dataset(SMALL_GEN)
    split = make_splits(ds.manifest, ds.samples, "UCDR", holdout_domain=3, holdout_class_fraction=1 / 3)
    return ds, split


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
