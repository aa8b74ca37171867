import numpy as np
import pytest

from rendfit.generator import Decoder
from rendfit.geometry import Box2D, CameraIntrinsics, DatasetStats


@pytest.fixture(scope="session")
def decoder():
    return Decoder(0)


@pytest.fixture
def camera():
    return CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854, 1242, 375)


@pytest.fixture
def stats():
    return DatasetStats(16.5, 4.9, (1.53, 1.63, 3.88), (0.14, 0.10, 0.43))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def box():
    return Box2D(100.0, 200.0, 200.0, 400.0)
