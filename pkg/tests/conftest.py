import time

import numpy as np
import pytest

from spigan import data
from spigan.training import Trainer, TrainConfig

DESK_DATA = data.DatasetSpec(source="synthetic", count=500, image_size=32, split_ratio=0.9, seed=1)

_results: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def record():
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def _record(name: str, passed: bool, detail: str = ""):
        _results.append((name, bool(passed), detail))
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _results:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}  {detail}")


@pytest.fixture(scope="session")
def desk_split():
    scenes = data.load_dataset(DESK_DATA)
    return data.split(scenes, DESK_DATA.split_ratio, DESK_DATA.seed)


@pytest.fixture(scope="session")
def desk_rgb_split():
    spec = data.DatasetSpec(**{**DESK_DATA.__dict__, "grayscale": False})
    scenes = data.load_dataset(spec)
    return data.split(scenes, spec.split_ratio, spec.seed)


def desk_config(**overrides) -> TrainConfig:
    base = dict(
        sr=0.1, image_size=32, epochs=30, batch_size=32, use_gan=False,
        perceptual=False, gen_features=32, seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


class RunCache:
    """Desk-scale trainings shared across acceptance tests (keyed by config)."""

    def __init__(self):
        self._runs = {}

    def get(self, split, **overrides):
        cfg = desk_config(**overrides)
        key = (tuple(sorted(cfg.to_dict().items(), key=lambda kv: kv[0])).__repr__(), id(split))
        if key not in self._runs:
            train_set, val_set = split
            start = time.perf_counter()
            trainer = Trainer(cfg)
            ckpt = trainer.fit(train_set, val_set)
            self._runs[key] = (trainer, ckpt, time.perf_counter() - start)
        return self._runs[key]


@pytest.fixture(scope="session")
def runs():
    return RunCache()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
