import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mfstack.experiments import StickyPriceParams, build_sticky_model  # noqa: E402
from mfstack.model import TimeGrid, build_model  # noqa: E402
from mfstack.strategy import solve_equilibrium  # noqa: E402

ACCEPTANCE = []   # (label, passed, detail) appended by test_acceptance
_INVARIANTS = {"passed": 0, "failed": []}


def scalar_model(steps=100, T=1.0, noise=True, **over):
    """Scalar test model with mild coupling."""
    s = 1.0 if noise else 0.0
    leader = dict(A0=-0.3, B0=1, C0=0.5, b0=0.1, sigma0=0.5 * s, sigmabar0=0.3 * s, xi0=0.5,
                  H0=1, f0=0.5, I0=0.2)
    follower = dict(A=-0.5, B=1, C=0.5, F=0.2, b=0.1, sigma=0.5 * s, sigmabar=0.3 * s, xi=1,
                    H=1, f=0.5, I=0.2)
    leader_cost = dict(Q0=1, S0=0.1, Gamma0=0.4, Gammabar0=0.1, eta0=0.5, G0=0.5, Gamma1=0.3)
    follower_cost = dict(Q=1, S=0.2, Gamma2=0.5, Gamma3=0.3, eta2=0.2, G=0.5, Gamma4=0.5)
    for sec, d in (("leader", leader), ("follower", follower), ("leader_cost", leader_cost),
                   ("follower_cost", follower_cost)):
        d.update(over.get(sec, {}))
    return build_model(TimeGrid(T, steps), 1, 1, leader=leader, follower=follower,
                       leader_cost=leader_cost, follower_cost=follower_cost)


def zero_model(steps=50, n=1, k=1, **sections):
    return build_model(TimeGrid(1.0, steps), n, k, **sections)


def sticky_spec(steps=500):
    return build_sticky_model(StickyPriceParams(), steps, enforce_simplex=False)


@pytest.fixture(scope="session")
def scalar_eq():
    return solve_equilibrium(scalar_model())


@pytest.fixture(scope="session")
def sticky_eq():
    return solve_equilibrium(sticky_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid:
        return
    if report.failed:
        _INVARIANTS["failed"].append(report.nodeid.split("::", 1)[-1])
    elif report.when == "call" and report.passed:
        _INVARIANTS["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    lines = [(("PASS" if ok else "FAIL"), label, detail) for label, ok, detail in ACCEPTANCE]
    inv = _INVARIANTS
    if inv["passed"] or inv["failed"]:
        bad = inv["failed"]
        detail = f"{inv['passed']} passed, {len(bad)} failed" + (f": {', '.join(bad)}" if bad else "")
        lines.append(("FAIL" if bad else "PASS", "Invariant suite", detail))
    else:
        lines.append(("SKIP", "Invariant suite", "run the full test suite to evaluate"))
    for status, label, detail in lines:
        terminalreporter.write_line(f"{status}  {label}  ({detail})")
