import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from coreset_fed.estimators import (
    AIHTCoreset, BayesianMLPClassifier, BayesianMLPRegressor, FederatedCoresetRegressor,
    SubsetSelector,
)


def regression_data(n=300, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 2))
    y = np.sin(np.pi * X[:, 0]) + 0.5 * X[:, 1] + 0.05 * rng.normal(size=n)
    return X, y


def test_params_and_clone():
    est = BayesianMLPRegressor(hidden_layer_sizes=(4,), n_iter=7)
    c = clone(est)
    assert c.get_params()["n_iter"] == 7 and c is not est
    est.set_params(n_iter=3)
    assert est.n_iter == 3


def test_regressor_fits_and_reports_uncertainty():
    X, y = regression_data()
    est = BayesianMLPRegressor(hidden_layer_sizes=(16,), n_iter=1500, sigma_eps=0.1,
                               random_state=0).fit(X, y)
    assert est.score(X, y) > 0.8
    mean, std = est.predict(X[:5], return_std=True)
    assert mean.shape == (5,) and np.all(std > 0)


def test_regressor_validation():
    with pytest.raises(NotFittedError):
        BayesianMLPRegressor().predict(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        BayesianMLPRegressor(n_iter=1).fit(np.zeros((3, 2)), np.zeros(4))


def test_zero_sample_weight_ignores_points():
    X, y = regression_data(100)
    w = np.ones(100)
    w[50:] = 0.0
    y_bad = y.copy()
    y_bad[50:] = 100.0
    kw = dict(hidden_layer_sizes=(8,), n_iter=200, random_state=1)
    a = BayesianMLPRegressor(**kw).fit(X, y_bad, sample_weight=w)
    assert np.all(np.abs(a.predict(X[:50])) < 10)


def test_classifier_separable_blobs():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-2, 0.5, size=(60, 2)), rng.normal(2, 0.5, size=(60, 2))])
    y = np.array(["a"] * 60 + ["b"] * 60)
    clf = BayesianMLPClassifier(hidden_layer_sizes=(8,), n_iter=400, random_state=0).fit(X, y)
    assert set(clf.classes_) == {"a", "b"}
    assert clf.score(X, y) > 0.95
    p = clf.predict_proba(X[:3])
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_aiht_coreset_planted():
    rng = np.random.default_rng(0)
    phi = rng.normal(size=(30, 50))
    w = np.zeros(50)
    w[[3, 11, 20, 33, 47]] = rng.uniform(0.5, 2, 5)
    est = AIHTCoreset(k=5, max_iter=300, tol=1e-12).fit(phi, phi @ w)
    np.testing.assert_array_equal(est.support_, [3, 11, 20, 33, 47])
    assert est.objective_ < 1e-8
    assert est.score(phi, phi @ w) == pytest.approx(-est.objective_)


def test_subset_selector():
    X, y = regression_data(40)
    sel = SubsetSelector(method="disparity_sum", k=8)
    Xs, ys = sel.fit_resample(X, y)
    assert Xs.shape == (8, 2) and ys.shape == (8,)
    np.testing.assert_array_equal(sel.transform(X), Xs)
    with pytest.raises(Exception):
        SubsetSelector(method="nope").fit(X)


def test_federated_regressor():
    X, y = regression_data(120)
    groups = (X[:, 0] > 0).astype(int)
    est = FederatedCoresetRegressor(hidden_layer_sizes=(8,), rounds=3, local_rounds=5,
                                    batch_size=20, aiht_max_iter=10).fit(X, y, groups)
    assert est.predict(X).shape == (120,)
    assert est.predict(X, group=1).shape == (120,)
    for g, w in est.coreset_weights_.items():
        assert np.count_nonzero(w) <= round(0.5 * np.sum(groups == g))
    with pytest.raises(Exception):
        est.fit(X, y, groups[:-1])
