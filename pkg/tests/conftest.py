import numpy as np
import pytest
import torch

from boostgan.facedata import FaceSample, KeypointSet, load_manifest
from boostgan.fixture import write_fixture

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fixture_manifest_path(tmp_path_factory):
    return write_fixture(tmp_path_factory.mktemp("fixture"))


@pytest.fixture(scope="session")
def fixture_manifest(fixture_manifest_path):
    return load_manifest(fixture_manifest_path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_sample(image=None, kps=((40, 50), (88, 50), (64, 75), (64, 98)), identity=0, pose=15):
    if image is None:
        image = np.random.default_rng(0).random((128, 128, 3)).astype(np.float32)
    return FaceSample(image, image.copy(), KeypointSet(*kps), identity, pose)


@pytest.fixture
def sample():
    return make_sample()
