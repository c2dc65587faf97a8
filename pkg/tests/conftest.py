import numpy as np
import pytest

from warpc import warpgen

CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

# lines recorded by the acceptance tests, printed once at the end of the run
ACCEPTANCE_LINES = []


def random_homography(rng, strength=0.1):
    return warpgen.homography_from_points(
        CORNERS, CORNERS + rng.uniform(-strength, strength, CORNERS.shape))


def hflow(H, h=64, w=64):
    return warpgen.rasterize(warpgen.HomographyParams(H), h, w)


def smooth_flow(rng, h, w, scale=2.0):
    """Random smooth flow: a mild homography plus a low-frequency ripple."""
    F = hflow(random_homography(rng, 0.08), h, w)
    ys, xs = np.mgrid[0:h, 0:w]
    for c in range(2):
        fx, fy, ph = rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2), rng.uniform(0, 6.3)
        F[..., c] += scale * 0.5 * np.sin(fx * xs + fy * ys + ph)
    return F


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
