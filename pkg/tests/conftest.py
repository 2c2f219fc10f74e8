import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from endorsim import DatasetConfig, make_dataset, ti47_field, ti47_system

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def ti47():
    return ti47_system()


@pytest.fixture
def field450():
    return ti47_field(0.45)


@pytest.fixture(scope="session")
def noisy_dataset():
    return make_dataset(DatasetConfig())


@pytest.fixture(scope="session")
def clean_dataset():
    return make_dataset(DatasetConfig(noise_fraction=0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in list(__import__("sys").modules.items())
                if name.endswith("test_acceptance") and hasattr(m, "RESULTS")), None)
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
