import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the root directory to Python path
root_dir = Path(__file__).parent.parent
sys.path.append(str(root_dir))

from utils.config import ModelConfig, TaskConfig, TrainConfig
from utils.signal_core import ViewFamily, as_logdist
from utils.toy_lm import init_params


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs (set AVSD_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("AVSD_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set AVSD_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def worked_student():
    return as_logdist(np.log([0.2, 0.5, 0.3]))


@pytest.fixture
def worked_family():
    return ViewFamily(np.log(np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1]])))


@pytest.fixture
def small_params():
    cfg = ModelConfig(vocab_size=12, width=4, hidden=8, window=3, init_scale=0.5)
    return init_params(cfg, np.random.default_rng(42))


@pytest.fixture
def tiny_config():
    """A few-second training config"""
    return TrainConfig(
        steps=3,
        batch_size=2,
        eval_every=0,
        eval_instances=4,
        eval_k=2,
        task=TaskConfig(modulus=5, chain_length=2, count=6),
        model=ModelConfig(width=4, hidden=8, window=4),
    )
