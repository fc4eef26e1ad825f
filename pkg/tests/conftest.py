import numpy as np
import pytest

from harvestjam import config
from harvestjam.mdp import MdpModel
from harvestjam.rvi import rvi_solve


@pytest.fixture(scope="session")
def sec6_cfg():
    return config.preset("paper_sec6")


@pytest.fixture(scope="session")
def sec6_model(sec6_cfg):
    return MdpModel(sec6_cfg.problem)


@pytest.fixture(scope="session")
def sec6_solution(sec6_model):
    return rvi_solve(sec6_model)


@pytest.fixture(scope="session")
def small_model():
    return MdpModel(config.preset("paper_sec6_small").problem)


@pytest.fixture(scope="session")
def small_solution(small_model):
    return rvi_solve(small_model)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
