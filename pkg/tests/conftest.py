import numpy as np
import pytest

from cpsf.agents import generate_dataset
from cpsf.predictor import TrajectoryPredictor
from cpsf.world import ScenarioConfig


@pytest.fixture(scope="session")
def small_config():
    return ScenarioConfig(num_agents=2, horizon_T=30, workspace_half_width=5.0)


@pytest.fixture(scope="session")
def small_data(small_config):
    """(train, filter-train, calibration) agents-only episodes for 2 agents."""
    return generate_dataset(small_config, 120, (0.5, 0.5, 0.0), rng_seed=123, cal_count=80)


@pytest.fixture(scope="session")
def small_predictor(small_config, small_data):
    return TrajectoryPredictor(num_agents=2, hidden=16, layers=1, epochs=3, workspace_half_width=5.0,
                               random_state=0).fit(small_data[0])


def straight_line_episodes(n, m=2, T=30, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        p0 = rng.uniform(-4, 4, (m, 2))
        v = rng.uniform(-0.1, 0.1, (m, 2))
        pos = p0[None] + np.arange(T + 1)[:, None, None] * v[None]
        out.append(pos + rng.normal(0, noise, pos.shape) if noise else pos)
    return out


# one PASS/FAIL line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
