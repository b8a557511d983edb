import numpy as np
import pytest

from aahqsnet.fem import ForwardModel
from aahqsnet.mesh import ElectrodeConfig, build_disk_mesh


@pytest.fixture(scope="session")
def electrodes():
    return ElectrodeConfig()


@pytest.fixture(scope="session")
def small_mesh(electrodes):
    return build_disk_mesh(200, electrodes)


@pytest.fixture(scope="session")
def small_model(small_mesh, electrodes):
    return ForwardModel(small_mesh, electrodes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
