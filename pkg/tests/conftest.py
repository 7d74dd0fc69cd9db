import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from semloop import ClassMap, PipelineConfig, PoseSE3


def random_pose(rng, max_t=10.0):
    R = Rotation.random(random_state=rng).as_matrix()
    return PoseSE3(R, rng.uniform(-max_t, max_t, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def config():
    return PipelineConfig()


@pytest.fixture
def class_map():
    return ClassMap.default()
