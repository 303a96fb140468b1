import numpy as np
import pytest

from fedec.datagen import PartitionSpec, shard_partition, synth_mixture
from fedec.nncore import Batch, NetworkSpec


def finite_difference(f, x, h=1e-5):
    """Central differences of scalar ``f`` at flat vector ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        out[i] = (f(up) - f(down)) / (2 * h)
    return out


@pytest.fixture
def net():
    return NetworkSpec((2, 16, 3))


@pytest.fixture
def small_batch():
    rng = np.random.default_rng(7)
    return Batch(rng.standard_normal((6, 2)), rng.integers(0, 3, size=6))


@pytest.fixture(scope="session")
def tiny_federation():
    """3 classes, 6 clients with 2 classes each, 2-D features."""
    ds = synth_mixture(3, 2, 40, 3.0, seed=1)
    return shard_partition(ds, PartitionSpec(6, 2, seed=1))


# acceptance criteria append "PASS name: detail" / "FAIL name: detail" lines here
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
