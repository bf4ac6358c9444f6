import numpy as np
import pytest

from segdistill.models import ModelConfig, build_model
from segdistill.rng import RngState


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_tnet():
    """Smallest useful T-Net: one pool stage, 3 maps, 3 classes."""
    cfg = ModelConfig(kind="tnet", num_blocks=2, feature_maps=3, kernel=3,
                      num_classes=3)
    return build_model(cfg, RngState(7))


def rand_f32(gen, *shape):
    return gen.standard_normal(shape).astype(np.float32)
