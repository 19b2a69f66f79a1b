import numpy as np
import pytest

from tpsmotion.geometry import AffineTransform, random_nondegenerate_points


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_affine(rng, spread=0.5):
    """A well-conditioned random affine map."""
    lin = np.eye(2) + rng.uniform(-spread, spread, size=(2, 2))
    while abs(np.linalg.det(lin)) < 0.2:
        lin = np.eye(2) + rng.uniform(-spread, spread, size=(2, 2))
    return AffineTransform(np.hstack([lin, rng.uniform(-0.3, 0.3, size=(2, 1))]))


def random_pair(rng, n):
    centers = random_nondegenerate_points(rng, n)
    return centers, centers + rng.uniform(-0.2, 0.2, size=centers.shape)


CRITERIA = {}


def record_criterion(number, passed, detail):
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
