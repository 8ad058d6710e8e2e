import numpy as np
import pytest

from hcnn.data import synth_crack
from hcnn.network import NetworkConfig, build_network

TINY = NetworkConfig(channel_scale=1 / 16)


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    for pos in np.ndindex(x.shape):
        orig = x[pos]
        x[pos] = orig + eps
        up = f()
        x[pos] = orig - eps
        down = f()
        x[pos] = orig
        g[pos] = (up - down) / (2 * eps)
    return g


def max_rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b))
    err = np.where(denom < floor, np.abs(a - b), np.abs(a - b) / np.maximum(denom, floor))
    return float(err.max())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_net():
    return build_network(TINY, rng=0, dtype=np.float64)


@pytest.fixture(scope="session")
def crack_sample():
    return synth_crack(0, 32, 0.05)


# -- acceptance summary ------------------------------------------------------

ACCEPTANCE = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    """Store one acceptance verdict; printed at the end of the session."""
    ACCEPTANCE[criterion] = (passed, detail)
    print(f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
