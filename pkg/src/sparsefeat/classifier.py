"""L1/L2-regularised multinomial logistic regression (the classifier head)."""

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import NumericError
from .solver import fista_solve


class _HeadObjective:
    """Mean cross-entropy over packed parameters ``[u.ravel(), r]``."""

    def __init__(self, X, y, n_classes):
        self.X, self.y, self.c = X, y, n_classes
        self.n, self.f = X.shape
        self.n_components = n_classes * (self.f + 1)
        self._L = None

    def unpack(self, w):
        return w[: self.c * self.f].reshape(self.c, self.f), w[self.c * self.f :]

    def value(self, w):
        u, r = self.unpack(w)
        s = self.X @ u.T + r
        return float(np.mean(logsumexp(s, axis=1) - s[np.arange(self.n), self.y]))

    def grad(self, w):
        u, r = self.unpack(w)
        p = softmax(self.X @ u.T + r, axis=1)
        p[np.arange(self.n), self.y] -= 1.0
        p /= self.n
        gu = p.T @ self.X
        return np.concatenate([gu.ravel(), p.sum(axis=0)])

    def lipschitz(self):
        if self._L is None:
            Xa = np.hstack([self.X, np.ones((self.n, 1))])
            # softmax Hessian <= 1/2 I per sample
            self._L = 1.05 * 0.5 * np.linalg.norm(Xa, 2) ** 2 / self.n + 1e-12
        return self._L


def head_objective(features, labels, u, r, l1, l2):
    """Full regularised objective value for ``(u, r)``."""
    obj = _HeadObjective(np.asarray(features, dtype=np.float64), np.asarray(labels), len(r))
    return obj.value(np.concatenate([u.ravel(), r])) + l1 * float(np.abs(u).sum()) + l2 * float(np.sum(u * u))


def classifier_train(features, labels, l1=1e-5, l2=1e-4, n_classes=None, max_iter=2000, tol=1e-10, init=None):
    """Fit ``(u, r)`` minimising mean cross-entropy + l1 ||u||_1 + l2 ||u||^2.

    Solved to tolerance by accelerated proximal gradient on the full batch;
    biases are not penalised. ``labels`` are integer class indices.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if not np.all(np.isfinite(X)):
        raise NumericError("features contain non-finite values")
    c = int(y.max()) + 1 if n_classes is None else n_classes
    obj = _HeadObjective(X, y, c)
    lam = np.concatenate([np.full(c * X.shape[1], l1), np.zeros(c)])
    ridge = np.concatenate([np.full(c * X.shape[1], l2), np.zeros(c)])
    w0 = None if init is None else np.concatenate([init[0].ravel(), init[1]])
    res = fista_solve(obj, lam, max_iter=max_iter, tol=tol, z0=w0, ridge=ridge)
    u, r = obj.unpack(res.z)
    return u.copy(), r.copy(), res


class L1L2LogisticRegression(ClassifierMixin, BaseEstimator):
    """sklearn-style wrapper around :func:`classifier_train`."""

    def __init__(self, l1=1e-5, l2=1e-4, max_iter=2000, tol=1e-10):
        self.l1 = l1
        self.l2 = l2
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        u, r, res = classifier_train(X, y_idx, self.l1, self.l2, len(self.classes_), self.max_iter, self.tol)
        self.coef_, self.intercept_ = u, r
        self.objective_ = res.objective
        self.n_iter_ = res.n_iter
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=np.float64) @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
