import numpy as np
import pytest

from wildfire_rnd.core.state import RunState
from wildfire_rnd.data.synthetic import synth_surface, write_synthetic_inputs


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="also run the long Monte Carlo and recovery repetitions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# =============================================================================
# FIXTURES
# =============================================================================

@pytest.fixture(autouse=True)
def fresh_state():
    """Every test starts without a configured RunState singleton."""
    RunState.reset()
    yield
    RunState.reset()


@pytest.fixture
def bs_slice():
    """Flat 20% vol, F=100, r=0, T=1, strikes 50..150 step 2."""
    return synth_surface(0.2, np.arange(50.0, 150.01, 2.0), 1.0, 100.0, 0.0)


@pytest.fixture
def bs_slice_coarse():
    """Flat 20% vol, F=100, r=0, T=1, strikes 50..150 step 5."""
    return synth_surface(0.2, np.arange(50.0, 150.01, 5.0), 1.0, 100.0, 0.0)


@pytest.fixture
def synthetic_inputs(tmp_path):
    """Bundled synthetic inputs and config.json under a temp directory."""
    return write_synthetic_inputs(tmp_path / "fixture")
