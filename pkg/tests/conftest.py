import numpy as np
import pytest

from fthd.cli import load_preset
from fthd.dynamics import EstimatedCoefficients, KnownCoefficients, coefficient_bounds
from fthd.ekf import EkfSettings, cov_bounds
from fthd.simulator import SimRun, TrackSpec, generate_dataset
from fthd.training import Problem


@pytest.fixture(scope="session")
def preset():
    return load_preset("sim")


@pytest.fixture(scope="session")
def bounds(preset):
    return coefficient_bounds(preset["bounds"])


@pytest.fixture(scope="session")
def known(preset):
    return KnownCoefficients(**preset["known"])


@pytest.fixture(scope="session")
def gt(preset):
    return EstimatedCoefficients.from_dict(preset["ground_truth"])


@pytest.fixture(scope="session")
def cov(preset):
    return cov_bounds(preset["cov_bounds"])


@pytest.fixture(scope="session")
def problem(bounds, known, cov):
    return Problem(bounds, known, EkfSettings(0.1, cov))


@pytest.fixture(scope="session")
def sim_samples(gt, known):
    return generate_dataset(SimRun(gt, known), TrackSpec())


def central_diff(f, x, h):
    """Central finite differences of scalar ``f`` over every entry of array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE, key=str):
            terminalreporter.write_line(ACCEPTANCE[k])
