import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from iap.data import stack, synthetic_splits
from iap.model import TrainConfig, accuracy, build_default_model, load_weights, save_weights, train

# desk-scale setup shared by the acceptance suite
N_TRAIN, N_TEST, DATA_SEED = 3000, 1000, 0
VICTIM = TrainConfig()  # 20 epochs, lr 0.01, momentum 0.9, batch 64, seed 42
SURROGATE = TrainConfig(seed=7)
SURROGATE_TRAIN = 1500

ACCEPTANCE_LINES = []


def cache_dir() -> Path:
    d = Path(os.environ.get("IAP_TEST_CACHE", Path.home() / ".cache" / "iap-tests"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _trained(name, cfg: TrainConfig, n_train: int):
    """Train once per configuration and cache the weights plus final test accuracy."""
    key = hashlib.sha256(json.dumps([asdict(cfg), n_train, N_TEST, DATA_SEED, 1]).encode()).hexdigest()[:16]
    weights = cache_dir() / f"{name}-{key}.iapw"
    meta = weights.with_suffix(".json")
    if weights.exists() and meta.exists():
        return load_weights(weights), json.loads(meta.read_text())["test_accuracy"]
    tr, te = synthetic_splits(N_TRAIN, N_TEST, DATA_SEED)
    x, y = stack(tr[:n_train])
    xt, yt = stack(te)
    model, _ = train(build_default_model(10, seed=cfg.seed), x, y, cfg)
    acc = accuracy(model, xt, yt)
    save_weights(model, weights)
    meta.write_text(json.dumps({"test_accuracy": acc}))
    return model, acc


@pytest.fixture(scope="session")
def splits():
    return synthetic_splits(N_TRAIN, N_TEST, DATA_SEED)


@pytest.fixture(scope="session")
def victim():
    return _trained("victim", VICTIM, N_TRAIN)


@pytest.fixture(scope="session")
def surrogate():
    return _trained("surrogate", SURROGATE, SURROGATE_TRAIN)[0]


@pytest.fixture(scope="session")
def record():
    def add(name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
