import numpy as np
import pytest

from lmlt.rng import Rng
from lmlt.tensor import Tensor


@pytest.fixture
def rng():
    return Rng(1234)


def rand_tensor(rng: Rng, shape, lo=-1.0, hi=1.0, dtype=np.float64) -> Tensor:
    n = int(np.prod(shape))
    return Tensor(rng.uniforms(n, lo, hi).reshape(shape), dtype=dtype)
