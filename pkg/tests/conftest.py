import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

ACCEPTANCE = {}


def record(criterion, passed, detail=""):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"[criterion {criterion}] {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# plants used across test modules
MOTIVATIONAL = dict(A=[[0, 1], [-2, 0.1]], B=[[0], [1]], K=[[1, 0]])
SIM_PLANT = dict(A=[[0, 1], [-2, 3]], B=[[0], [1]], K=[[1, -4]])


SIM_SCENARIOS = (
    "online-unperturbed-beta0", "online-unperturbed-beta01",
    "offline-unperturbed-beta0", "offline-unperturbed-beta01",
    "online-perturbed-beta0", "online-perturbed-beta01",
    "offline-perturbed-beta0", "offline-perturbed-beta01",
)


class _Lab:
    """Lazily prepared scenario setups and traces, shared by the whole session."""

    def __init__(self):
        self._setups, self._traces = {}, {}

    def scenario(self, name):
        from selftrig.scenario import load_scenario

        return load_scenario(name)

    def setup(self, name):
        from selftrig.scenario import prepare

        if name not in self._setups:
            self._setups[name] = prepare(self.scenario(name))
        return self._setups[name]

    def trace(self, name):
        from selftrig.sim import run

        if name not in self._traces:
            self._traces[name] = run(self.scenario(name), setup=self.setup(name), dense=False)
        return self._traces[name]


@pytest.fixture(scope="session")
def lab():
    return _Lab()
