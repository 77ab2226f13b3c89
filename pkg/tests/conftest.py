import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from geometry import Pose2, box_polytope, vehicle_polytope  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def unit_square():
    return box_polytope(1.0, 1.0)


@pytest.fixture
def car():
    return vehicle_polytope(Pose2(0.0, 0.0, 0.0), 4.5, 1.8)
