import logging

import numpy as np
import pytest

from dataset import Domain, UserSequence, filter_and_split
from evaluation import EvalConfig
from network import ModelConfig
from synthetic import SyntheticConfig, generate_synthetic
from trainer import TrainConfig

X, Y = Domain.X, Domain.Y


def seq(user_index, *items):
    """seq(0, (2, X), (3, Y)) shorthand."""
    return UserSequence(user_index, tuple(items))


def numeric_grad(fn, array, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. ``array`` (modified in place)."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        old = array[idx]
        array[idx] = old + h
        plus = fn()
        array[idx] = old - h
        minus = fn()
        array[idx] = old
        grad[idx] = (plus - minus) / (2 * h)
    return grad


@pytest.fixture(autouse=True)
def quiet_logger():
    logging.getLogger("dpgdiff_logger").setLevel(logging.CRITICAL)
    yield


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_items_x=10, n_items_y=10, d=4, n_heads=1, enc_layers=1, dec_layers=1,
                       max_seq_len=3, T=10)


@pytest.fixture
def tiny_sequences():
    return [
        seq(0, (2, X), (3, Y), (4, X)),
        seq(1, (5, Y), (6, Y)),
        seq(2, (7, X)),
        seq(3, (3, Y), (8, X), (9, Y)),
    ]


@pytest.fixture(scope="session")
def synthetic_events():
    cfg = SyntheticConfig(n_users=24, n_items_x=20, n_items_y=20, n_shared_interests=4,
                          n_specific_interests=2, rng_seed=3)
    events, _ = generate_synthetic(cfg)
    return events


@pytest.fixture(scope="session")
def synthetic_split(synthetic_events):
    return filter_and_split(synthetic_events)


@pytest.fixture
def small_model_cfg():
    return ModelConfig(d=8, n_heads=2, enc_layers=1, dec_layers=1, T=10)


@pytest.fixture
def small_train_cfg():
    return TrainConfig(lr=5e-3, batch_size=32, epochs=3, warmup_epochs=1, seed=0)


@pytest.fixture
def small_eval_cfg():
    return EvalConfig(n_negatives=5, eval_batch_size=64, seed=0)
