import numpy as np
import pytest

from amnesiac.data import find_mnist, load_mnist, synth_blobs

requires_mnist = pytest.mark.skipif(find_mnist() is None, reason="MNIST IDX files not available")


@pytest.fixture(scope="session")
def blobs():
    return synth_blobs(4, 40, 6, 0.3, seed=5)


@pytest.fixture(scope="session")
def mnist():
    if find_mnist() is None:
        pytest.skip("MNIST IDX files not available")
    return load_mnist()


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


# one line per acceptance criterion, printed after the run whatever the capture mode
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
