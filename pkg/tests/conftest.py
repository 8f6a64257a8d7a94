import numpy as np
import pytest

from sonomae import model as M
from sonomae import synthetic
from sonomae.rng import Rng


@pytest.fixture
def tiny_cfg():
    return M.ModelConfig.tiny()


@pytest.fixture
def tiny_model(tiny_cfg):
    return M.MaePretrainModel(tiny_cfg, Rng(7))


@pytest.fixture
def smooth_corpus():
    return synthetic.smooth_images(8, 64, Rng(11))


@pytest.fixture
def rand_image():
    return Rng(3).random((3, 64, 64)).astype(np.float32)
