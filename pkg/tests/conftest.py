import numpy as np
import pytest

from mvpower.copula import fit_copula
from mvpower.glm import build_model_matrix, fit_manyglm
from mvpower.synthetic import make_pilot


@pytest.fixture(scope="session")
def pilot():
    return make_pilot(p=6, n_per_group=8, means=np.geomspace(0.8, 12.0, 6), seed=3)


@pytest.fixture(scope="session")
def pilot_fit(pilot):
    X = build_model_matrix(pilot.design, ["Site.Type"])
    return fit_manyglm(pilot.counts, X, "negative_binomial")


@pytest.fixture(scope="session")
def pilot_model(pilot, pilot_fit):
    return fit_copula(pilot_fit, pilot.counts, 1, np.random.default_rng(11), seed=11)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
