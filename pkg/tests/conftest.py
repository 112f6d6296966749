import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    from framesynth.model import GeneratorConfig
    return GeneratorConfig(pyramid_levels=3, blocks_per_subnet=1, filters=8, kernel=3)
