import numpy as np
import pytest

from edlab.statespace import ConfigGrid, EnsembleState, normalize


def smooth_state(grid: ConfigGrid, seed: int) -> EnsembleState:
    """Positive two-bump density with a smooth random phase."""
    rng = np.random.default_rng(seed)
    X = grid.coords
    rho = 0.05 + sum(
        rng.uniform(0.5, 1.0) * np.exp(-sum((c - rng.normal()) ** 2 for c in X)) for _ in range(2)
    )
    phi = sum(rng.normal() * np.sin(rng.uniform(0.3, 1.0) * c + rng.normal()) for c in X)
    return normalize(EnsembleState(grid, rho, phi * np.ones(grid.shape)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance lines, printed again at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
