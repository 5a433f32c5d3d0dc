import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False,
        help="run the desk-scale acceptance tests",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def oscillator_1d():
    from problem_generator import Oscillator

    return Oscillator(dim=1, half_width=8.0, cells=128).get_problem()


@pytest.fixture
def box_2d():
    from problem_generator import Particle_in_box

    return Particle_in_box(dim=2, cells=12).get_problem()
