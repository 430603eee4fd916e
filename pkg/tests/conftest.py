import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def in_range_weights(rng, shape, scale=0.05):
    """Random signed bf16-exact weights whose exponents lie in [112, 143]."""
    from moepack.toy_moe import to_toy_weights

    return to_toy_weights(rng.standard_normal(shape).astype(np.float32) * np.float32(scale))
