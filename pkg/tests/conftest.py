import numpy as np
import pytest

from exvid.model import ModelConfig, build_model
from exvid.tensor import Tensor


@pytest.fixture
def tiny_config():
    # smallest config that still has two levels and nontrivial group norm
    return ModelConfig(base_frames=4, channels=(8, 16), video_channels=3,
                       height=8, width=8, norm_groups=4)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def tiny_batch(tiny_config):
    rng = np.random.default_rng(123)
    c = tiny_config
    return {
        "video": Tensor(rng.standard_normal(
            (1, c.base_frames, c.video_channels, c.height, c.width), dtype=np.float32)),
        "first_frame": Tensor(rng.standard_normal(
            (1, c.video_channels, c.height, c.width), dtype=np.float32)),
        "timestep": np.array([17]),
    }
