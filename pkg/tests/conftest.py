import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rbpose.codebook import build_codebook
from rbpose.simulator import SymmetrySpec, SyntheticEncoder, SyntheticObject
from rbpose.so3_grid import REDUCED_GRID

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def box_object():
    return SyntheticObject("box", SymmetrySpec(), code_seed=11)


@pytest.fixture(scope="session")
def reduced_codebook(box_object):
    return build_codebook(SyntheticEncoder(box_object), REDUCED_GRID, box_object.object_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
