"""
Shared fixtures: a small trained base model with explored variants,
fixture trade-off metrics and the traffic DAG
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from baselib import DatasetSpec, LayerProfile, cache_split, gen_dataset, train_base
from cachelib import CacheTrainingConfig, CostModel, explore, parse_arch, tradeoff_fixture
from nnlib import TrainConfig
from planlib import traffic_dag

SMALL_WIDTHS = [32, 32, 32, 32]


@pytest.fixture(scope="session")
def small_dataset():
    return gen_dataset(DatasetSpec(num_classes=4, input_dim=16, samples_per_class=100, separation=4.0,
                                   noise_std=0.8, seed=7))


@pytest.fixture(scope="session")
def small_base(small_dataset):
    return train_base(small_dataset, TrainConfig(0.05, 0.9, 30, 32, seed=1), SMALL_WIDTHS)


@pytest.fixture(scope="session")
def small_cache_config():
    train = TrainConfig(0.05, 0.9, 40, 32)
    return CacheTrainingConfig(predictor=train, selector=train)


@pytest.fixture(scope="session")
def small_explored(small_dataset, small_base, small_cache_config):
    train, measure = cache_split(small_dataset.validation, 0.8, seed=3)
    menu = [parse_arch("FC(16)"), parse_arch("Pool(8)")]
    return explore(small_base, train, measure, menu, CostModel(), small_cache_config, seed=0)


@pytest.fixture
def tradeoff_metrics():
    return tradeoff_fixture("cpu", "full")


@pytest.fixture
def tradeoff_example_metrics():
    return tradeoff_fixture("cpu", "example")


@pytest.fixture
def uniform_profile():
    return LayerProfile.uniform(8, 4.0)


@pytest.fixture
def dag():
    return traffic_dag()
