import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ssl2d import dataset as D

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def tiny_fixed():
    return D.build_dataset(D.DatasetConfig(mode="fixed-layout", n_samples=12, seed=11))


@pytest.fixture(scope="session")
def tiny_layouts():
    return D.build_dataset(D.DatasetConfig(mode="randomized-layout", n_samples=12, seed=12))


@pytest.fixture(scope="session")
def tiny_target():
    return D.build_dataset(D.target_domain_config(n_samples=12, seed=13))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = [
        value
        for key in ("passed", "failed")
        for rep in terminalreporter.stats.get(key, [])
        if rep.when == "call"
        for name, value in rep.user_properties
        if name == "acceptance"
    ]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
