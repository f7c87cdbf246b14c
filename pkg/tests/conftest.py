import numpy as np
import pytest

from dgcpn.dataset import gen_synthetic

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_ds():
    return gen_synthetic(4, 15, 6, 5, noise=0.2, label_noise=0.0, seed=3)


@pytest.fixture(scope="session")
def criterion(request):
    """``criterion(n, ok, detail)`` records and prints one PASS/FAIL line, then asserts ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
