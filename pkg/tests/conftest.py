import numpy as np
import pytest

from gomesh import make_test_rig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tubeman():
    return make_test_rig(4, 16, 12)


@pytest.fixture
def tiny_tubeman():
    """Small enough for gradient checks; jittered so no symmetric alignments."""
    av = make_test_rig(3, 4, 3)
    jitter = np.random.default_rng(77).standard_normal(av.positions.shape) * 0.004
    av.positions += jitter
    return av


def random_triangle(rng, min_area=1e-4, scale=1.0):
    while True:
        tri = rng.standard_normal((3, 3)) * scale
        area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
        if area > min_area:
            return tri
