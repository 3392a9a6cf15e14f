import numpy as np
import pytest

from cdeq.numeric import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def psd_contraction(rng, n=10, radius=0.9):
    """Symmetric PSD matrix with spectral radius exactly ``radius``."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = rng.uniform(0.0, radius, n)
    lam[np.argmax(lam)] = radius
    return (Q * lam) @ Q.T


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
