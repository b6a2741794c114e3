import numpy as np

from sparsefeat.classifier import L1L2LogisticRegression, classifier_train, head_objective


def test_separable_perfect(rng):
    X = rng.standard_normal((60, 4))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    clf = L1L2LogisticRegression(l1=0.0, l2=0.0, max_iter=3000).fit(X, y)
    assert clf.score(X, y) == 1.0


def test_long_run_oracle(rng):
    X = rng.standard_normal((50, 6))
    y = rng.integers(0, 3, 50)
    u, r, res = classifier_train(X, y, 1e-3, 1e-2, 3, max_iter=500, tol=1e-300)
    u2, r2, _ = classifier_train(X, y, 1e-3, 1e-2, 3, max_iter=5000, tol=1e-300)
    assert head_objective(X, y, u, r, 1e-3, 1e-2) - head_objective(X, y, u2, r2, 1e-3, 1e-2) < 1e-4


def test_strong_l2_gives_priors(rng):
    X = rng.standard_normal((40, 3))
    y = np.array([0] * 30 + [1] * 10)
    clf = L1L2LogisticRegression(l1=0.0, l2=1e6).fit(X, y)
    assert np.max(np.abs(clf.coef_)) < 1e-5
    np.testing.assert_allclose(clf.predict_proba(X)[0], [0.75, 0.25], atol=1e-4)


def test_sklearn_api(rng):
    X = rng.standard_normal((30, 3))
    y = np.where(X[:, 0] > 0, "a", "b")
    clf = L1L2LogisticRegression().fit(X, y)
    assert set(clf.predict(X)) <= {"a", "b"}
    assert clf.get_params()["l2"] == 1e-4
