"""Shared fixtures plus the acceptance-criteria summary printed at the end."""

import numpy as np
import pytest

from ditcache.config import ExperimentConfig
from ditcache.model import init_model, linear_schedule

# (criterion, passed) pairs recorded by tests/test_acceptance.py
ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


def record_acceptance(name: str, passed: bool) -> None:
    ACCEPTANCE_RESULTS.append((name, passed))
    print(f"[acceptance] {'PASS' if passed else 'FAIL'}: {name}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}: {name}")


@pytest.fixture
def small_model():
    return init_model(7, 4, 8, (1, 4, 4))


@pytest.fixture
def small_schedule():
    return linear_schedule(6)


@pytest.fixture
def small_config():
    cfg = ExperimentConfig()
    cfg.model.blocks = 4
    cfg.model.channels = 8
    cfg.model.frames = 1
    cfg.model.height = 8
    cfg.model.width = 8
    cfg.run.steps = 8
    cfg.schedule.warmup = 1
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(0xBEEF)
