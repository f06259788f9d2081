import os

import numpy as np
import pytest

from hcfeedback.integrate import TimeGrid
from hcfeedback.problems import CuckerSmaleProblem, lqr2d, make_problem
from hcfeedback.sampling import Dataset, GenerationError, generate_dataset

from oracles import riccati_P0

# Set HCFEEDBACK_TEST_CACHE to a directory to reuse the expensive datasets
# between runs; by default everything is regenerated.
CACHE = os.environ.get("HCFEEDBACK_TEST_CACHE")

ACCEPTANCE = {}


def _cached(name, build):
    if CACHE:
        path = os.path.join(CACHE, name)
        if os.path.exists(path):
            return Dataset.load(path)
        ds = build()
        os.makedirs(CACHE, exist_ok=True)
        ds.save(path)
        return ds
    return build()


@pytest.fixture(scope="session")
def lqr():
    return lqr2d()


@pytest.fixture(scope="session")
def riccati(lqr):
    return riccati_P0(lqr)


@pytest.fixture(scope="session")
def lqr_dataset(lqr):
    return _cached("lqr_100.csv", lambda: generate_dataset(lqr, 100))


@pytest.fixture(scope="session")
def vdp():
    return make_problem("vanderpol")


@pytest.fixture(scope="session")
def vdp_dataset(vdp):
    """Desk-scale Van der Pol data: N=600, dt=1e-3."""
    return _cached(
        "vdp_600.csv",
        lambda: generate_dataset(vdp, 600, grid=TimeGrid(3.0, 1e-3), scheme="rk4", chunk_size=600),
    )


@pytest.fixture(scope="session")
def cs_small():
    return CuckerSmaleProblem(N_a=5, d=2, T=5.0)


def _keep_flagged(build):
    """Return the dataset even when most solves are flagged non-converged."""
    try:
        return build()
    except GenerationError as exc:
        return exc.dataset


@pytest.fixture(scope="session")
def cs_dataset(cs_small):
    return _cached(
        "cs_500.csv",
        lambda: _keep_flagged(
            lambda: generate_dataset(cs_small, 500, grid=TimeGrid(5.0, 0.02), scheme="rk4", chunk_size=500)
        ),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """Record an acceptance verdict; printed in the terminal summary."""

    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
