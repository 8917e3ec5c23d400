import numpy as np
import pytest

from uemprompt.autodiff import make_rng


@pytest.fixture
def rng():
    return make_rng(12345)


def rand(rng, *shape):
    return rng.standard_normal(shape)
