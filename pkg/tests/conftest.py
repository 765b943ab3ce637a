import numpy as np
import pytest

from udmlss.config import ExperimentConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """A config that trains in well under a second per epoch."""
    return ExperimentConfig(
        k=4, P=4, M=5, epochs=3, seed=7, synth_classes=4, synth_per_class=20,
        synth_heldout_per_class=5, image_size=16, widths=[4, 8, 8], d_embed=8,
        checkpoint_every=1, eta=0.5,
    )


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record():
    """Collects one summary line per acceptance criterion."""
    return _ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
