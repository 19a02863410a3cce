import numpy as np
import pytest
from hypothesis import settings

from das_index.core import ClientModel

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def model_b10():
    """B=10, T=4, two qualities and three power levels."""
    return ClientModel(10, 4, [0.1, 0.5], [0.0, 1.0, 2.0], [[0.0, 0.5, 0.7], [0.0, 0.6, 0.9]],
                       outage_period_weight=3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def acceptance_line(request):
    """Record a criterion's verdict line for the terminal summary."""
    def record(line: str) -> None:
        print(line)
        request.config.stash[_LINES].append(line)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
