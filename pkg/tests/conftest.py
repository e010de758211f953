from pathlib import Path

import numpy as np
import pytest

from dynchance.gaussian import GaussianSpec
from dynchance.instances import reservoir_model, reservoir_stages
from dynchance.timeseries import compact_form, decompose_coefficients

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def reservoir():
    """(stage system, compact form, noise law) of the three-stage reservoir instance."""
    model = reservoir_model()
    cf = compact_form(decompose_coefficients(model), model)
    return reservoir_stages(), cf, GaussianSpec(cf.Sigma)


@pytest.fixture
def rng():
    return np.random.default_rng(20261014)


# acceptance criteria register (number, passed, detail) here for the summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
