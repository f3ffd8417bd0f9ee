import os

import numpy as np
import pytest

from gridstate.estimation import EstimationProblem
from gridstate.measurements import measure, standard_plan
from gridstate.network import load_case, solve_power_flow

DATA = os.path.join(os.path.dirname(__file__), "data")

# the four two-bus measurements |v1|^2, p2, q2, p1
TWO_BUS_PLAN = [("vm", 0), ("p", 1), ("q", 1), ("p", 0)]
# eight-entry set used where the four-entry set leaves selections underdetermined
TWO_BUS_PLAN_8 = TWO_BUS_PLAN + [("vm", 1), ("q", 0), ("pf", 0), ("qf", 0)]


def two_bus(plan=TWO_BUS_PLAN):
    net = load_case("case2")
    v = solve_power_flow(net)
    return net, v, EstimationProblem(net, measure(v, net, plan))


@pytest.fixture(scope="session")
def case2():
    return two_bus()


@pytest.fixture(scope="session")
def case14():
    net = load_case("case14")
    v = solve_power_flow(net)
    return net, v, EstimationProblem(net, measure(v, net, standard_plan(net)))


def polar(m, deg):
    return m * np.exp(1j * np.deg2rad(deg))


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
