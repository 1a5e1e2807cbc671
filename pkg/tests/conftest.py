import numpy as np
import pytest

from twafl.data import synthetic_pool
from twafl.params import LayeredParams
from twafl.protocol import ProtocolConfig


def const_params(value, shapes=((3, 2), (2,), (2, 4), (4,)), split=2):
    return LayeredParams.from_arrays([np.full(s, float(value)) for s in shapes], split)


def random_params(rng, shapes=((3, 2), (2,), (2, 4), (4,)), split=2):
    return LayeredParams.from_arrays([rng.normal(size=s) for s in shapes], split)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pool():
    return synthetic_pool(4, 6, 60, 0.5, np.random.default_rng(7))


@pytest.fixture
def small_config():
    return ProtocolConfig(
        variant="TWAFL", K=4, C=0.5, a=np.e / 2, rounds_in_loop=3, es_rounds={0},
        B=8, E=1, eta=0.1, total_rounds=6, seed=3, hidden=(5, 7), split_layers=1,
        s_min=10, s_max=20, threshold=0.9,
    )


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    if call.when == "call":
        item.rep_call = outcome.get_result()
