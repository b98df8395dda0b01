import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from reptools.balance import BalanceScheme, ExperimentFrame  # noqa: E402
from reptools.design import RngStream, complete_randomization  # noqa: E402
from reptools.simharness import PopulationSpec, generate_population, run_replications  # noqa: E402

# lines collected by the acceptance suite and echoed in the terminal summary
ACCEPTANCE_LINES = []

TWO_ARM_SEED = 2024
REPLICATION_SEED = 7


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cubic_population():
    return generate_population(PopulationSpec.cubic_two_arm(), RngStream(TWO_ARM_SEED, 0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def t_schemes():
    """The three two-sample t schemes with matched acceptance rates, plus a
    stricter joint variant."""
    return {
        "t-marginal": BalanceScheme("t", "marginal", alpha_marginal=0.15),
        "t-joint": BalanceScheme("t", "joint", alpha_joint=0.55),
        "t-consensus": BalanceScheme("t", "consensus", alpha_marginal=0.15, alpha_joint=0.55),
        "t-joint-95": BalanceScheme("t", "joint", alpha_joint=0.95),
    }


@pytest.fixture(scope="session")
def cubic_replications(cubic_population):
    """5000 filtering replications of the two-arm cubic population with
    plug-in interval hits; shared by several acceptance criteria."""
    return run_replications(cubic_population, t_schemes(), 5000, REPLICATION_SEED, plugin=True)


def random_frame(gen, n=60, j=3, arms=(25, 35), with_outcomes=True):
    x = gen.normal(size=(n, j))
    labels = gen.permutation(np.repeat(np.arange(1, len(arms) + 1), arms))
    y = x @ gen.normal(size=j) + gen.normal(size=n) if with_outcomes else None
    return ExperimentFrame(x, assignment=labels, outcomes=y)


def cre_frame(frame, gen):
    return frame.with_assignment(complete_randomization(frame.arm_sizes, gen))
