import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flft import Model, SparseTensor  # noqa: E402


def random_model(shape, rank, rng, scale=1.0, biases=True):
    S, M, T = (rng.normal(0, scale, (d, rank)) for d in shape)
    if biases:
        a, b, c = (rng.normal(0, 0.5, d) for d in shape)
    else:
        a, b, c = (np.zeros(d) for d in shape)
    return Model(S, M, T, a, b, c)


def random_tensor(shape, n, rng, scale=1.0):
    cells = rng.choice(int(np.prod(shape)), size=n, replace=False)
    idx = np.stack(np.unravel_index(cells, shape), axis=1)
    return SparseTensor(shape, idx, rng.normal(0, scale, n))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
