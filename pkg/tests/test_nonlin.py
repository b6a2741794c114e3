import numpy as np
import pytest

from sparsefeat.exceptions import ParameterError
from sparsefeat.nonlin import abs_rectify, abs_rectify_backward, soft_shrink, soft_shrink_grad, tanh_backward

from oracles import rel_err, soft_shrink_mp


def test_zero_maps_to_zero():
    for b, beta in [(0.1, 5.0), (2.0, 0.3), (-0.5, 50.0)]:
        assert soft_shrink(0.0, b, beta) == 0.0


def test_asymptote_value():
    assert abs(soft_shrink(5.0, 1.0, 10.0) - soft_shrink_mp(5.0, 1.0, 10.0)) < 1e-14
    assert abs(soft_shrink(5.0, 1.0, 10.0) - 4.0) < 1e-15


@pytest.mark.parametrize("x,b,beta", [(0.3, 0.1, 5.0), (-2.0, 0.5, 1.0), (40.0, 1.0, 30.0), (1e-3, 0.2, 100.0), (-7.0, -0.3, 2.0)])
def test_matches_high_precision(x, b, beta):
    assert abs(soft_shrink(x, b, beta) - soft_shrink_mp(x, b, beta)) < 1e-12 * max(1.0, abs(x))


def test_antisymmetric(rng):
    x = rng.standard_normal(100) * 3
    np.testing.assert_allclose(soft_shrink(-x, 0.3, 4.0), -soft_shrink(x, 0.3, 4.0), atol=0)


def test_large_inputs_finite():
    y = soft_shrink(np.array([1e6, -1e6]), 0.1, 1e3)
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [1e6 - 0.1, -(1e6 - 0.1)])


def test_derivative_limits():
    dx, _, _ = soft_shrink_grad(np.array([60.0]), 0.5, 5.0)
    assert abs(dx[0] - 1.0) < 1e-12
    left, _, _ = soft_shrink_grad(np.array([-1e-9]), 0.5, 5.0)
    right, _, _ = soft_shrink_grad(np.array([1e-9]), 0.5, 5.0)
    assert abs(left[0] - right[0]) < 1e-7


def test_partials_finite_differences(rng):
    h = 1e-6
    for _ in range(20):
        x = rng.uniform(-3, 3)
        b = rng.uniform(0.05, 1)
        beta = rng.uniform(0.5, 10)
        dx, db, dbeta = soft_shrink_grad(np.array([x]), b, beta)
        nx = (soft_shrink(x + h, b, beta) - soft_shrink(x - h, b, beta)) / (2 * h)
        nb = (soft_shrink(x, b + h, beta) - soft_shrink(x, b - h, beta)) / (2 * h)
        nbeta = (soft_shrink(x, b, beta + h) - soft_shrink(x, b, beta - h)) / (2 * h)
        # partials near zero are compared on an absolute scale of 1e-2
        assert rel_err(dx, nx, floor=1e-2) < 1e-5
        assert rel_err(db, nb, floor=1e-2) < 1e-5
        assert rel_err(dbeta, nbeta, floor=1e-2) < 1e-5


def test_beta_must_be_positive():
    with pytest.raises(ParameterError):
        soft_shrink(1.0, 0.1, 0.0)


def test_abs_rectify(rng):
    np.testing.assert_array_equal(abs_rectify(np.array([-3.0, 0.0, 2.0])), [3, 0, 2])
    t = rng.standard_normal((2, 3, 3))
    np.testing.assert_array_equal(abs_rectify(abs_rectify(t)), abs_rectify(t))
    x = rng.standard_normal(50)
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    g = rng.standard_normal(50)
    h = 1e-6
    num = (np.abs(x + h) - np.abs(x - h)) / (2 * h) * g
    assert rel_err(abs_rectify_backward(x, g), num) < 1e-6
    assert abs_rectify_backward(np.array([0.0]), np.array([1.0]))[0] == 0.0


def test_tanh_backward(rng):
    a = rng.standard_normal(10)
    g = rng.standard_normal(10)
    h = 1e-6
    num = (np.tanh(a + h) - np.tanh(a - h)) / (2 * h) * g
    assert rel_err(tanh_backward(np.tanh(a), g), num) < 1e-7
