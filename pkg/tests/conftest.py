import numpy as np
import pytest

from lfkm.lightfield import make_synthetic_lf
from lfkm.model import NetworkConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest useful network: 16x16 views on a 3x3 grid."""
    return NetworkConfig(X=16, Y=16, U=3, V=3, c_m=2, c_d=4, r=6, n=16)


@pytest.fixture
def tiny_lf():
    return make_synthetic_lf("checkerboard-parallax", 16, 16, 3, 3, 1, period=8)


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion id -> (passed, detail); printed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE_KEY, None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(log, key=lambda k: (int(k.rstrip("abcdefgh")), k)):
        passed, detail = log[key]
        terminalreporter.write_line(f"criterion {key:>3}: {'PASS' if passed else 'FAIL'}  {detail}")
