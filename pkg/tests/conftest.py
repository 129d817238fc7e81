import numpy as np
import pytest
from hypothesis import settings

from ifou.kernels import ModelParams, TimeGrid, Trajectory
from ifou.simulator import SimRequest, simulate_positions

settings.register_profile("ifou", max_examples=25, deadline=None)
settings.load_profile("ifou")


def simulate_trajectory(params, grid, seed, mu0=0.0):
    from ifou.kernels import InitialState

    body = simulate_positions(SimRequest(grid, params, InitialState(mu0), seed=seed))[0]
    return Trajectory(grid, np.concatenate(([mu0], body)))


@pytest.fixture(scope="session")
def traj100():
    """n = 100, Delta = 0.1 trajectory with sigma = 2, beta = 3, H = 0.7."""
    return simulate_trajectory(ModelParams(2.0, 3.0, 0.7), TimeGrid.regular(100, 0.1), seed=1)


def pytest_terminal_summary(terminalreporter, config):
    from test_acceptance import ACCEPTANCE_KEY

    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
