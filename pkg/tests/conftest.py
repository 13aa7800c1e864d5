"""Shared fixtures: a small fast dataset for module tests and the full
shipped benchmark plus trained models for the acceptance suite."""

import pytest

from dpars.dataset import SyntheticConfig, benchmark_dataset
from dpars.model import DparsConfig
from dpars.train import TrainConfig, train_loop

SMALL_SYNTH = SyntheticConfig(
    seed=7,
    duration_s=5.0,
    n_channels=16,
    dwell_s=(0.8, 1.4),
)

SMALL_MODEL = DparsConfig(c_in=16, d_enc=6, t_seq=20, h_atn=6, d_exp=12,
                          h_attr=10, n_states=11, n_fingers=6, h_refn=8)

SMALL_TRAIN = TrainConfig(epochs=8, seed=0, lam=0.02, batch_size=64)


@pytest.fixture(scope="session")
def small_dataset():
    """Five seconds per repetition, 16 channels: fast but non-trivial."""
    return benchmark_dataset(synth=SMALL_SYNTH)


@pytest.fixture(scope="session")
def small_model_config():
    return SMALL_MODEL


@pytest.fixture(scope="session")
def small_trained(small_dataset):
    """One short training run shared by train/evaluate/cli tests."""
    params, report = train_loop(small_dataset, SMALL_MODEL, SMALL_TRAIN)
    return params, report


@pytest.fixture(scope="session")
def benchmark():
    """The shipped synthetic benchmark (seed 42, defaults)."""
    return benchmark_dataset(seed=42)


class ModelZoo:
    """Caches benchmark models per entropy weight across acceptance tests."""

    def __init__(self, dataset):
        self.dataset = dataset
        self._cache = {}

    def get(self, lam: float, epochs: int = 100, seed: int = 0):
        key = (lam, epochs, seed)
        if key not in self._cache:
            cfg = TrainConfig(epochs=epochs, seed=seed, lam=lam)
            self._cache[key] = train_loop(self.dataset, DparsConfig(), cfg)
        return self._cache[key]


@pytest.fixture(scope="session")
def model_zoo(benchmark):
    return ModelZoo(benchmark)
