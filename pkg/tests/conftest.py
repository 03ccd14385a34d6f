import numpy as np
import pytest

from eventcalib.camera import Distortion, Intrinsics
from eventcalib.events import DAVIS346
from eventcalib.pattern import PatternSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def geometry():
    return DAVIS346


@pytest.fixture
def spec_4x11():
    return PatternSpec(4, 11, 24.0)


@pytest.fixture
def true_intrinsics():
    return Intrinsics(350.0, 352.0, 160.0, 120.0)


@pytest.fixture
def true_distortion():
    return Distortion(-0.34, 0.12, -0.02, -0.0006, -0.0005)
