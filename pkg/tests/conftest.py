import numpy as np
import pytest

from resprop.model import Activation, BlockKind, InitScheme, NetworkConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def small_config(block="plain", activation="identity", depth=3, width=4, batch=5, variance=0.3):
    return NetworkConfig(
        depth, width, Activation(activation), BlockKind(block),
        InitScheme.fixed(variance), batch_size=batch,
    )
