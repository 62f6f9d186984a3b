import numpy as np
import pytest

from escp.config import ProblemConfig
from escp.dynamics import double_integrator, torus_manipulator
from escp.problem import OcpProblem, state_waypoint

# Closed-form minimum-energy transfer of p'' = u from (0, 0) to (1, 0) over [0, 1]:
# u(t) = 6 - 12 t, cost 12, costate (24, 12 - 24 t).
DI_COST = 12.0
DI_GAMMA0 = np.array([24.0, 12.0])


def di_control(t):
    return 6.0 - 12.0 * np.asarray(t)


def di_state(t):
    t = np.asarray(t)
    return np.stack([3 * t ** 2 - 2 * t ** 3, 6 * t - 6 * t ** 2], axis=-1)


def make_di_problem(bound=100.0, goal=(1.0, 0.0), horizon=1.0, waypoints=None):
    sys = double_integrator(1)
    wps = waypoints if waypoints is not None else [state_waypoint(horizon, goal)]
    return OcpProblem(sys, np.eye(1), np.zeros(2), wps, horizon, [-bound], [bound])


def make_torus_problem(start, goal, joints=2, horizon=1.0, bound=10.0):
    sys = torus_manipulator(joints)
    return OcpProblem(sys, np.eye(joints), np.asarray(start, float), [state_waypoint(horizon, goal)],
                      horizon, [-bound] * joints, [bound] * joints)


@pytest.fixture
def di_problem():
    return make_di_problem()


@pytest.fixture
def desk_config():
    return ProblemConfig.load(bundled("freeflyer_desk"))


def bundled(name):
    from escp.config import bundled_config_dir

    return bundled_config_dir() / f"{name}.json"


# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
