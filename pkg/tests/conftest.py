import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qmdpnet.domains import build_ground_truth_pomdp, gen_grid_env, sample_task

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def grid10():
    env = gen_grid_env(10, seed=5)
    task = sample_task(env, 5)
    return env, task


@pytest.fixture(scope="session")
def grid10_det(grid10):
    env, task = grid10
    return env, task, build_ground_truth_pomdp(env, "det", task.goal)


@pytest.fixture(scope="session")
def grid10_stoch(grid10):
    env, task = grid10
    return env, task, build_ground_truth_pomdp(env, "stoch", task.goal)
