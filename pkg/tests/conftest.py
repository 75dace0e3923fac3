import numpy as np
import pytest

from cropgrasp.config import Config
from cropgrasp.synth import build_dataset

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Ten desk-scale scenes written to disk once per session."""
    out = tmp_path_factory.mktemp("ds10")
    return build_dataset(Config().dataset, 10, 3, out)
