import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from coreset_fed.baselines import (
    FedAvgConfig, SimilarityKernel, disparity_min, disparity_sum, fedavg_run,
    greedy_maximize, local_sgd, logdet_value, make_selector, random_subset,
)
from coreset_fed.bnn import LabeledDataset, NetworkSpec, evaluate
from coreset_fed.exceptions import DimensionError, DomainError


def line_kernel(points):
    pts = np.asarray(points, float)
    return SimilarityKernel(np.eye(len(pts)), np.abs(pts[:, None] - pts[None, :]))


def test_logdet_hand_values():
    assert logdet_value(SimilarityKernel(np.eye(4)), [0, 2, 3]) == pytest.approx(0.0)
    k = SimilarityKernel(np.diag([2.0, 3.0]))
    assert logdet_value(k, [0, 1]) == pytest.approx(np.log(6.0))
    with pytest.raises(DomainError):
        logdet_value(k, [])


def test_logdet_singular_is_minus_inf():
    assert logdet_value(SimilarityKernel(np.ones((3, 3))), [0, 1]) == -np.inf


@given(st.integers(0, 2**31 - 1))
def test_logdet_matches_dense_determinant(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(6, 6))
    k = SimilarityKernel(A @ A.T + 0.1 * np.eye(6))
    sub = sorted(rng.choice(6, size=int(rng.integers(1, 7)), replace=False))
    assert logdet_value(k, sub) == pytest.approx(np.log(np.linalg.det(k.L[np.ix_(sub, sub)])),
                                                 rel=1e-9, abs=1e-9)


def test_disparity_hand_values():
    k = line_kernel([0, 1, 10])
    assert disparity_sum(k, [0, 1, 2]) == pytest.approx(20.0)
    assert disparity_min(k, [0, 2]) == pytest.approx(10.0)
    assert disparity_min(k, [0, 1, 2]) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        disparity_min(k, [1])


@given(arrays(float, 5, elements=st.floats(-10, 10)), st.integers(2, 5))
def test_disparity_brute_force(points, size):
    k = line_kernel(points)
    sub = list(range(size))
    pairs = [abs(points[i] - points[j]) for i, j in itertools.combinations(sub, 2)]
    assert disparity_sum(k, sub) == pytest.approx(sum(pairs), abs=1e-9)
    assert disparity_min(k, sub) == pytest.approx(min(pairs), abs=1e-9)


def test_kernel_validation():
    with pytest.raises(DimensionError):
        SimilarityKernel(np.eye(3), np.zeros((2, 2)))
    with pytest.raises(DomainError):
        SimilarityKernel(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_rbf_kernel_from_points():
    X = np.random.default_rng(0).normal(size=(10, 3))
    k = SimilarityKernel.from_points(X)
    np.testing.assert_allclose(np.diag(k.L), 1.0)
    assert np.all(np.linalg.eigvalsh(k.L) > -1e-10)
    np.testing.assert_allclose(np.diag(k.d), 0.0)


def test_greedy_disparity_min_picks_extremes():
    assert sorted(greedy_maximize(disparity_min, line_kernel([0, 1, 10]), 2)) == [0, 2]


def test_greedy_logdet_picks_largest_diagonal():
    k = SimilarityKernel(np.diag([1.0, 4.0, 9.0]))
    assert sorted(greedy_maximize(logdet_value, k, 2)) == [1, 2]


def test_greedy_edge_cases():
    k = line_kernel([0, 1, 2, 3])
    assert sorted(greedy_maximize(disparity_sum, k, 4)) == [0, 1, 2, 3]
    assert greedy_maximize(disparity_sum, k, 0) == []
    with pytest.raises(DomainError):
        greedy_maximize(disparity_sum, k, 5)


def test_greedy_disparity_sum_beats_random_selection():
    wins = 0
    for seed in range(20):
        X = np.random.default_rng(seed).normal(size=(30, 2))
        k = SimilarityKernel.from_points(X)
        g = disparity_sum(k, greedy_maximize(disparity_sum, k, 6))
        r = disparity_sum(k, random_subset(30, 6, seed))
        wins += g >= r
    assert wins == 20


def test_random_subset_edges_and_uniformity():
    assert random_subset(5, 0, 0).size == 0
    np.testing.assert_array_equal(random_subset(5, 5, 0), np.arange(5))
    counts = np.zeros(10)
    for s in range(5000):
        counts[random_subset(10, 3, s)] += 1
    sd = np.sqrt(5000 * 0.3 * 0.7)
    assert np.all(np.abs(counts - 1500) < 4 * sd)
    with pytest.raises(DomainError):
        random_subset(3, 4, 0)


def test_make_selector_budget():
    X = np.random.default_rng(0).normal(size=(20, 2))
    data = LabeledDataset(X, X[:, :1])
    for name in ("logdet", "disparity_sum", "disparity_min", "random"):
        idx = make_selector(name, 0.25, seed=1)(data, 0)
        assert len(np.unique(idx)) == 5
    with pytest.raises(DomainError):
        make_selector("nope", 0.5)


def linear_problem(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = X @ np.array([[1.0], [-2.0], [0.5]]) + 0.1 * rng.normal(size=(n, 1))
    return LabeledDataset(X, y)


SPEC = NetworkSpec((3, 1), sigma_eps=1.0)


def test_fedavg_zero_rounds_keeps_initial_weights():
    theta0 = np.arange(4.0)
    trace, theta = fedavg_run(SPEC, [linear_problem()], FedAvgConfig(rounds=0), theta0=theta0)
    np.testing.assert_array_equal(theta, theta0)
    assert {r.round for r in trace.rows} == {0}


def test_fedavg_single_client_is_plain_sgd():
    data = linear_problem()
    cfg = FedAvgConfig(rounds=3, local_rounds=7, batch_size=16, lr=0.05, seed=4)
    theta0 = np.zeros(4)
    _, theta = fedavg_run(SPEC, [data], cfg, theta0=theta0)
    ref = theta0
    for t in range(3):
        ref = local_sgd(SPEC, ref, data, 7, 16, 0.05, np.random.default_rng([4, 2, t, 0]))
    np.testing.assert_array_equal(theta, ref)


def test_fedavg_on_identical_clients_matches_centralised():
    data = linear_problem()
    test = linear_problem(500, seed=1)
    cfg = FedAvgConfig(rounds=40, local_rounds=5, batch_size=20, lr=0.05, seed=0)
    _, theta_fed = fedavg_run(SPEC, [data, data, data], cfg, theta0=np.zeros(4))
    theta_c = local_sgd(SPEC, np.zeros(4), data, 200, 20, 0.05, np.random.default_rng(3))
    fed = evaluate(SPEC, theta_fed, test)["mse"]
    cen = evaluate(SPEC, theta_c, test)["mse"]
    assert abs(fed - cen) <= 0.05 * cen


def test_fedavg_with_selector_uses_subsets():
    data = linear_problem(40)
    trace, _ = fedavg_run(SPEC, [data], FedAvgConfig(rounds=1, local_rounds=1),
                          subset_selector=make_selector("random", 0.25, 0), theta0=np.zeros(4))
    assert [r.round for r in trace.select("train_mse")] == [0, 1]
