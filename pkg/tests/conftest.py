"""Shared desk-scale fixtures.

Training six small models takes under a minute, so it happens once per
session and every module that needs a trained model borrows from here.
"""

import time
from dataclasses import dataclass

import numpy as np
import pytest

from hyvic.data import synth_dataset
from hyvic.model import HyvicConfig
from hyvic.training import TrainConfig, TrainResult, train

DESK_MODEL = HyvicConfig(C=8, N=16, M=24, S=1, k=3)
DESK_LAMBDAS = (1e-2, 1e2)
DESK_SEEDS = (0, 1, 2)
DESK_STEPS = 300
DESK_LR = 3e-3


def desk_train_config(lam, seed, **kw):
    base = dict(lam=lam, epochs=1000, batch_size=8, lr_main=DESK_LR, lr_aux=1e-3, seed=seed, max_steps=DESK_STEPS)
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class DeskRuns:
    train_cubes: list
    heldout_cubes: list
    runs: dict  # (lam, seed) -> TrainResult
    train_seconds: float

    def result(self, lam, seed=0) -> TrainResult:
        return self.runs[(lam, seed)]


@pytest.fixture(scope="session")
def desk_data():
    files = synth_dataset(40, 8, 16, 16, seed=0)
    cubes = [f.normalized() for f in files]
    return cubes[:32], cubes[32:]


@pytest.fixture(scope="session")
def desk_runs(desk_data):
    train_cubes, heldout = desk_data
    runs = {}
    t0 = time.perf_counter()
    for lam in DESK_LAMBDAS:
        for seed in DESK_SEEDS:
            runs[(lam, seed)] = train(train_cubes, DESK_MODEL, desk_train_config(lam, seed))
    return DeskRuns(train_cubes, heldout, runs, time.perf_counter() - t0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance report ------------------------------------------------------------

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion; the summary prints a line per entry."""
    results = request.config.stash[_ACCEPTANCE_KEY]

    class Recorder:
        def __init__(self):
            self.number = None

        def __call__(self, number, text):
            self.number = number
            results[number] = ("FAIL", text, "")
            return self

        def detail(self, message):
            status, text, _ = results[self.number]
            results[self.number] = (status, text, message)

        def passed(self):
            _, text, message = results[self.number]
            results[self.number] = ("PASS", text, message)

    return Recorder()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, text, message = results[number]
        line = f"criterion {number:>2}: {status}  {text}"
        terminalreporter.write_line(line + (f"  [{message}]" if message else ""))
