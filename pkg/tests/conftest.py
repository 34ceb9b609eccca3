"""Shared fixtures; expensive trained models are cached on disk."""

import hashlib
import json
import pickle
import time
from dataclasses import asdict
from pathlib import Path

import pytest

from hierreg.pipeline import (ModelConfig, TrainConfig, evaluate_pairs,
                              init_model, make_pairs, train)

CACHE_DIR = Path(__file__).parent / "_cache"
HOLDOUT_SEED = 31337  # disjoint from TrainConfig.seed + {1, 2}


def cached_training(model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Train (or load a cached copy of) a model; returns (model, info)."""
    key = json.dumps([asdict(model_cfg), asdict(train_cfg)], sort_keys=True)
    digest = hashlib.sha256(key.encode()).hexdigest()[:16]
    path = CACHE_DIR / f"model-{digest}.pkl"
    if path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    t0 = time.time()
    model, history = train(init_model(model_cfg), train_cfg)
    info = {"history": history, "seconds": time.time() - t0}
    CACHE_DIR.mkdir(exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump((model, info), fh)
    return model, info


@pytest.fixture(scope="session")
def trained_model():
    """Model after the default training run."""
    return cached_training(ModelConfig(), TrainConfig())


@pytest.fixture(scope="session")
def trained_model_no_similarity():
    """Identical training with the coarse similarity features disabled."""
    return cached_training(ModelConfig(use_similarity=False), TrainConfig())


@pytest.fixture(scope="session")
def holdout_pairs():
    """200 held-out synthetic pairs (overlap 0.7-1.0, sigma 0.01)."""
    return make_pairs(200, HOLDOUT_SEED)


@pytest.fixture(scope="session")
def holdout_results(trained_model, holdout_pairs):
    model, _ = trained_model
    return evaluate_pairs(model, holdout_pairs)
