import numpy as np
import pytest

from robust_tucker.synth import random_orthonormal
from robust_tucker.tensor_core import TuckerFactors


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_tucker(rng, dims, ranks, scale=1.0):
    factors = tuple(random_orthonormal(d, r, rng) for d, r in zip(dims, ranks))
    core = scale * rng.standard_normal(ranks)
    return TuckerFactors(core, factors)


def random_shape(rng, order=None, max_dim=8, min_dim=2):
    m = order or int(rng.integers(2, 5))
    dims = tuple(int(d) for d in rng.integers(min_dim, max_dim + 1, size=m))
    return dims


def random_ranks(rng, dims):
    # keep every rank feasible: r_k <= d_k and r_k <= prod of the other ranks
    while True:
        ranks = tuple(int(rng.integers(1, d + 1)) for d in dims)
        total = int(np.prod(ranks))
        if all(r <= total // r for r in ranks):
            return ranks
