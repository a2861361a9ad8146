import numpy as np
import pytest

from singlepos.model import ConvClassifier, ModelConfig

# criterion lines recorded by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    cfg = ModelConfig(input_size=16, channels=[3, 4, 5], num_classes=3)
    return ConvClassifier.create(cfg, seed=7, dtype=np.float64)
