import numpy as np
import pytest

from sltk import LayerShape, SparseMask, WeightTensor


def flat_shape(c_out: int, n: int) -> LayerShape:
    """A layer shape with a 1x1 kernel, so n == c_in."""
    return LayerShape(c_out, n, 1, 1)


def random_mask(rng: np.random.Generator, c_out: int, n: int, density: float,
                name: str = "layer") -> SparseMask:
    bits = rng.random((c_out, n)) < density
    return SparseMask(name, flat_shape(c_out, n), bits)


def random_weights(rng: np.random.Generator, c_out: int, n: int,
                   name: str = "layer") -> WeightTensor:
    values = rng.standard_normal((c_out, n)).astype(np.float32)
    return WeightTensor(name, flat_shape(c_out, n), values)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
