"""Shared fixtures and the acceptance-summary terminal hook."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dashkin import datastore, synthgen

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-pipeline runs that take minutes")


@pytest.fixture(scope="session")
def tiny_store(tmp_path_factory):
    """Six short synthetic chunks (10 frames, 16x16), one drive each."""
    root = tmp_path_factory.mktemp("tiny_store")
    return synthgen.make_corpus(root, n_chunks=6, difficulty="standard",
                                seed=3, frame_size=16, fps=5.0,
                                chunk_seconds=2.0, noise=0.02)


@pytest.fixture(scope="session")
def tiny_split(tiny_store):
    return datastore.split_dataset(tiny_store.metas(), val_fraction=1 / 3, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance criterion verdicts whether or not capture is on."""
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "CRITERION_LINES", None) if module else None
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
