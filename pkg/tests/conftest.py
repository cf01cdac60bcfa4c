from __future__ import annotations

import sys

import numpy as np
import pytest

from rnmpc import systems
from rnmpc.polytope import synth_terminal


class ScalarSetup:
    """Scalar quadratic model with its analytic curvature bound and terminal set."""

    def __init__(self):
        self.m = systems.load_model("scalar_quadratic")
        self.C = systems.default_constraints("scalar_quadratic")
        self.cost = systems.default_cost("scalar_quadratic")
        self.err = systems.stored_error_bound("scalar_quadratic", self.m)
        self.ti = synth_terminal(self.m, self.cost, self.err, self.C)


class CartpoleSetup:
    def __init__(self):
        self.m = systems.load_model("cartpole")
        self.C = systems.default_constraints("cartpole")
        self.cost = systems.default_cost("cartpole")
        self.err = systems.stored_error_bound("cartpole", self.m)
        self.ti = synth_terminal(self.m, self.cost, self.err, self.C)


@pytest.fixture(scope="session")
def scalar():
    return ScalarSetup()


@pytest.fixture(scope="session")
def cartpole():
    return CartpoleSetup()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def scalar_plan(scalar):
    """Optimal robust plan for the scalar model from ``x = 0.5``."""
    from rnmpc.scp import RmpcController, ScpConfig

    ctrl = RmpcController(scalar.m, scalar.err, scalar.C, scalar.cost, scalar.ti, ScpConfig(T=10))
    res = ctrl.solve(np.array([0.5]))
    assert res.status == "optimal"
    return res.plan


class DoubleIntegratorSetup:
    def __init__(self):
        self.m = systems.load_model("double_integrator")
        self.C = systems.default_constraints("double_integrator")
        self.cost = systems.default_cost("double_integrator")
        self.err = systems.stored_error_bound("double_integrator", self.m)
        self.ti = synth_terminal(self.m, self.cost, self.err, self.C)


@pytest.fixture(scope="session")
def double_integrator():
    return DoubleIntegratorSetup()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
