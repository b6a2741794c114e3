import numpy as np
import pytest
from scipy.sparse.linalg import aslinearoperator

from sparsefeat.exceptions import DimensionError, LabelError, NumericError, ParameterError
from sparsefeat.solver import SmoothTerm, fista_solve, ista_solve, logistic_loss, smooth_grad, soft_threshold

from oracles import coordinate_minimise, lasso_cd, lasso_objective, logistic_mp, rel_err


def test_logistic_values():
    loss, g = logistic_loss(np.zeros(2), 0)
    assert abs(loss - np.log(2)) < 1e-15
    loss, g = logistic_loss(np.array([10.0, -10.0]), 0)
    assert abs(loss - logistic_mp([10.0, -10.0], 0)) < 1e-14 * loss
    assert abs(g.sum()) < 1e-15
    with pytest.raises(LabelError):
        logistic_loss(np.zeros(3), 3)


def test_identity_closed_form(rng):
    x = rng.standard_normal(20)
    lam = 0.7
    res = fista_solve(SmoothTerm(x, np.eye(20)), lam, max_iter=500, tol=1e-15)
    np.testing.assert_allclose(res.z, soft_threshold(x, lam / 2), atol=1e-8)


def test_zero_input():
    res = fista_solve(SmoothTerm(np.zeros(8), np.random.default_rng(0).standard_normal((8, 16))), 0.5)
    assert not np.any(res.z)


def test_matches_coordinate_descent(rng):
    for _ in range(5):
        D = rng.standard_normal((8, 16))
        D /= np.linalg.norm(D, axis=0)
        x = rng.standard_normal(8)
        res = fista_solve(SmoothTerm(x, D), 0.5, max_iter=5000, tol=1e-15)
        oracle = lasso_objective(x, D, lasso_cd(x, D, 0.5), 0.5)
        assert abs(res.objective - oracle) < 1e-6


def test_fista_not_worse_than_ista(rng):
    for _ in range(10):
        D = rng.standard_normal((8, 16))
        x = rng.standard_normal(8)
        term = SmoothTerm(x, D)
        f = fista_solve(term, 0.5, max_iter=100, tol=1e-300)
        i = ista_solve(term, 0.5, max_iter=100, tol=1e-300)
        assert f.objective <= i.objective + 1e-12


def test_trace_monotone(rng):
    D = rng.standard_normal((10, 30))
    res = fista_solve(SmoothTerm(rng.standard_normal(10), D), 0.1, max_iter=300, tol=1e-300)
    assert np.all(np.diff(res.trace) <= 0)


def test_linear_operator_dictionary(rng):
    D = rng.standard_normal((8, 16))
    x = rng.standard_normal(8)
    a = fista_solve(SmoothTerm(x, D), 0.5, max_iter=200)
    b = fista_solve(SmoothTerm(x, aslinearoperator(D)), 0.5, max_iter=200)
    np.testing.assert_allclose(a.z, b.z, atol=1e-10)


def test_gradient_least_squares(rng):
    D = rng.standard_normal((12, 5))
    x = rng.standard_normal(12)
    z = np.linalg.lstsq(D, x, rcond=None)[0]
    assert np.max(np.abs(smooth_grad(SmoothTerm(x, D), z))) < 1e-10


def test_gradient_finite_differences(rng):
    D = rng.standard_normal((6, 9))
    x = rng.standard_normal(6)
    u = rng.standard_normal((3, 9))
    r = rng.standard_normal(3)
    for term in (SmoothTerm(x, D), SmoothTerm(x, D, y=2, u=u, r=r, lambda1=0.3)):
        z = rng.standard_normal(9)
        h = 1e-6
        num = np.array([(term.value(z + h * e) - term.value(z - h * e)) / (2 * h) for e in np.eye(9)])
        assert rel_err(term.grad(z), num) < 1e-6


def test_discriminative_lambda_zero_ignores_reconstruction(rng):
    u = rng.standard_normal((3, 9))
    r = rng.standard_normal(3)
    z = rng.standard_normal(9)
    g1 = SmoothTerm(rng.standard_normal(6), rng.standard_normal((6, 9)), y=1, u=u, r=r, lambda1=0.0).grad(z)
    g2 = SmoothTerm(rng.standard_normal(6), rng.standard_normal((6, 9)), y=1, u=u, r=r, lambda1=0.0).grad(z)
    np.testing.assert_array_equal(g1, g2)


def test_discriminative_matches_coordinate_oracle(rng):
    D = rng.standard_normal((6, 5))
    x = rng.standard_normal(6)
    u = rng.standard_normal((3, 5))
    r = rng.standard_normal(3)
    term = SmoothTerm(x, D, y=0, u=u, r=r, lambda1=0.5)
    res = fista_solve(term, 0.3, max_iter=5000, tol=1e-15)
    zo = coordinate_minimise(lambda z: term.value(z) + 0.3 * np.abs(z).sum(), np.zeros(5))
    assert res.objective <= term.value(zo) + 0.3 * np.abs(zo).sum() + 1e-7


def test_lipschitz_is_upper_bound(rng):
    D = rng.standard_normal((6, 9))
    u = rng.standard_normal((4, 9))
    term = SmoothTerm(rng.standard_normal(6), D, y=1, u=u, r=np.zeros(4), lambda1=1.0)
    L = term.lipschitz()
    for _ in range(50):
        a, b = rng.standard_normal(9) * 3, rng.standard_normal(9) * 3
        assert np.linalg.norm(term.grad(a) - term.grad(b)) <= L * np.linalg.norm(a - b) * (1 + 1e-12)


def test_errors(rng):
    with pytest.raises(DimensionError):
        SmoothTerm(np.zeros(3), np.zeros((4, 2)))
    with pytest.raises(ParameterError):
        fista_solve(SmoothTerm(np.zeros(3), np.eye(3)), -1.0)
    with pytest.raises(NumericError):
        fista_solve(SmoothTerm(np.array([np.inf, 0, 0]), np.eye(3)), 0.1)
