import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", derandomize=True, deadline=None)
settings.load_profile("repo")

from perfbloch import HoleShape, Lattice2, ShapeFamily


@pytest.fixture
def square():
    return Lattice2.square()


@pytest.fixture
def disk():
    return HoleShape(0.25)


@pytest.fixture
def homothetic(disk):
    return ShapeFamily.homothetic(disk)


def free_spectrum(k, n, dual=None):
    """Sorted ``|k + G|^2`` over reciprocal vectors ``G``; brute-force enumeration."""
    dual = 2 * np.pi * np.eye(2) if dual is None else dual
    m = np.array([(a, b) for a in range(-4, 5) for b in range(-4, 5)])
    return np.sort(np.sum((np.asarray(k, float)[None, :] + m @ dual.T) ** 2, axis=1))[:n]
