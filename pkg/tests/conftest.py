import os

import pytest
import torch

from pkm.config import BUNDLED_CORPUS
from pkm.corpus import load_corpus
from pkm.schemas import ModelConfig, TrainConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training experiments (set PKM_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("PKM_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set PKM_RUN_SLOW=1 to run desk-scale experiments")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    return load_corpus(BUNDLED_CORPUS)


@pytest.fixture
def tiny_model_config(tiny_corpus):
    return ModelConfig(
        vocab_size=tiny_corpus.vocab_size,
        n_layers=2,
        d_model=16,
        n_heads=2,
        context=16,
        memory_positions=[2],
        memory={"n_sub": 4, "heads": 2, "k": 2, "dq": 8},
        seed=0,
    )


@pytest.fixture
def tiny_train_config():
    return TrainConfig(steps=4, batch_size=4, eval_batch_size=8, warmup=2, log_every=1)
