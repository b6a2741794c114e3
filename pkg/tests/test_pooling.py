import numpy as np
import pytest

from sparsefeat.exceptions import DimensionError, ParameterError
from sparsefeat.pooling import PoolSpec, PyramidSpec, pool, pool_backward, pool_forward, pyramid_backward, pyramid_forward, pyramid_pool

from oracles import central_diff, rel_err


def test_architecture_pool_shapes():
    assert pool(np.zeros((64, 135, 135)), PoolSpec("avg", 10, 5)).shape == (64, 26, 26)
    assert pool(np.zeros((64, 26, 26)), PoolSpec("max", 4, 2)).shape == (64, 12, 12)


@pytest.mark.parametrize("kind", ["avg", "max"])
def test_constant_map(kind):
    np.testing.assert_allclose(pool(np.full((2, 9, 9), 3.5), PoolSpec(kind, 3, 2)), 3.5)


def test_avg_matches_loops(rng):
    x = rng.standard_normal((2, 9, 8))
    out = pool(x, PoolSpec("avg", 3, 2))
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            np.testing.assert_allclose(out[:, i, j], x[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3].mean(axis=(1, 2)))


def test_max_tie_first_index():
    x = np.ones((1, 1, 2, 2))
    _, cache = pool_forward(x, PoolSpec("max", 2, 2))
    g = pool_backward(np.ones((1, 1, 1, 1)), cache)
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


@pytest.mark.parametrize("kind", ["avg", "max"])
def test_backward_finite_differences(rng, kind):
    spec = PoolSpec(kind, 3, 2)
    x = rng.standard_normal((2, 2, 7, 9))
    out, cache = pool_forward(x, spec)
    w = rng.standard_normal(out.shape)
    g = pool_backward(w, cache)

    def f():
        return float(np.sum(pool_forward(x, spec)[0] * w))

    assert rel_err(central_diff(f, x), g) < 1e-6


def test_pyramid_lengths():
    spec = PyramidSpec(((6, 4), (8, 5), (10, 8), (18, 18)))
    assert spec.output_length(256, 18, 18) == 256 * (16 + 9 + 4 + 1)
    assert pyramid_pool(np.zeros((256, 18, 18)), spec).shape == (7680,)


def test_pyramid_single_level_is_avg(rng):
    x = rng.random((3, 8, 8))
    np.testing.assert_allclose(pyramid_pool(x, PyramidSpec(((4, 2),))), pool(x, PoolSpec("avg", 4, 2)).ravel())
    assert not np.any(pyramid_pool(np.zeros((3, 8, 8)), PyramidSpec(((4, 2), (8, 8)))))


def test_pyramid_backward(rng):
    spec = PyramidSpec(((2, 1), (4, 4)))
    x = rng.standard_normal((1, 2, 4, 4))
    out, caches = pyramid_forward(x, spec)
    w = rng.standard_normal(out.shape)
    g = pyramid_backward(w, caches)

    def f():
        return float(np.sum(pyramid_forward(x, spec)[0] * w))

    assert rel_err(central_diff(f, x), g) < 1e-6


def test_bad_specs():
    with pytest.raises(ParameterError):
        PoolSpec("median", 2, 2)
    with pytest.raises(ParameterError):
        PoolSpec("avg", 2, 3)
    with pytest.raises(DimensionError):
        pool(np.zeros((1, 3, 3)), PoolSpec("avg", 4, 1))
