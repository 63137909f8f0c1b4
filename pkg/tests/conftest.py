import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    evals = np.geomspace(1.0, cond, n)
    return (q * evals) @ q.T


def random_lowrank_spd(rng, n, k1, k2):
    """Random diagonal-plus-low-rank matrix that is positive definite."""
    from freehunch.matrix_core import LowRankDiagMatrix

    d = rng.uniform(1.0, 3.0, n)
    u = rng.standard_normal((n, k1))
    v = rng.standard_normal((n, k2))
    # shrink V until D + UU^T - VV^T stays well inside the cone
    a = np.diag(d) + u @ u.T
    for _ in range(60):
        if np.linalg.eigvalsh(a - v @ v.T)[0] > 0.05 * d.min():
            break
        v *= 0.7
    return LowRankDiagMatrix(d, u, v)


# ------------------------------------------------------------ acceptance report

ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 10


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


def pytest_collection_modifyitems(config, items):
    config.stash[ACCEPTANCE]["collected"] = any(i.module.__name__ == "test_acceptance" for i in items)


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash[ACCEPTANCE]
    if not verdicts.pop("collected", False):
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, N_CRITERIA + 1):
        line = verdicts.get(number)
        if line is None:
            line = f"criterion {number:2d} FAIL: no verdict (test errored or was deselected)"
        terminalreporter.write_line(line)
