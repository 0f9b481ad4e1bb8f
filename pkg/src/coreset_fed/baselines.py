"""Subset-selection and point-estimate baselines.

Diversity-based selectors (log-determinant, disparity-sum, disparity-min)
are maximised greedily. ``fedavg_run`` trains a deterministic network with
federated averaging, optionally on a pre-selected subset of each client.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .bnn import LabeledDataset, NetworkSpec, evaluate, init_variational, loglik_theta_grad
from .exceptions import DimensionError, DomainError
from .metrics import GLOBAL_CLIENT, MetricsTrace


@dataclass(frozen=True)
class SimilarityKernel:
    """Similarity matrix ``L`` (PSD) and distance matrix ``d`` over ``n`` points.

    ``d`` defaults to all zeros, which is enough for the log-det objective.
    """

    L: np.ndarray
    d: Optional[np.ndarray] = None

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        d = np.zeros_like(L) if self.d is None else np.asarray(self.d, dtype=float)
        if L.ndim != 2 or L.shape[0] != L.shape[1] or d.shape != L.shape:
            raise DimensionError("L and d must be square matrices of the same size")
        if not np.allclose(L, L.T, atol=1e-10, rtol=0):
            raise DomainError("L must be symmetric")
        if not np.allclose(d, d.T, atol=1e-10, rtol=0):
            raise DomainError("d must be symmetric")
        if np.any(d < 0) or np.any(np.diag(d) != 0):
            raise DomainError("d must be nonnegative with a zero diagonal")
        if L.size and np.linalg.eigvalsh(L).min() < -1e-8:
            raise DomainError("L must be positive semidefinite")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "d", d)

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @classmethod
    def from_points(cls, X, gamma: Optional[float] = None) -> "SimilarityKernel":
        """RBF similarities with bandwidth ``gamma`` (median pairwise distance by default)."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        cond = pdist(X)
        d = squareform(cond)
        if gamma is None:
            gamma = float(np.median(cond)) if cond.size else 1.0
            if gamma <= 0:
                gamma = 1.0
        L = np.exp(-d ** 2 / (2.0 * gamma ** 2))
        return cls(L, d)


def _subset(kern, subset):
    s = np.asarray(sorted(set(int(i) for i in subset)), dtype=np.int64)
    if s.size and (s.min() < 0 or s.max() >= kern.n):
        raise DomainError("subset index out of range")
    return s


def logdet_value(kern: SimilarityKernel, subset) -> float:
    """``log det L_S``; ``-inf`` when ``L_S`` is singular."""
    s = _subset(kern, subset)
    if s.size == 0:
        raise DomainError("log-det needs a nonempty subset")
    sign, val = np.linalg.slogdet(kern.L[np.ix_(s, s)])
    return float(val) if sign > 0 else -np.inf


def disparity_sum(kern: SimilarityKernel, subset) -> float:
    """Sum of distances over unordered pairs in the subset."""
    s = _subset(kern, subset)
    return float(np.triu(kern.d[np.ix_(s, s)], 1).sum())


def disparity_min(kern: SimilarityKernel, subset) -> float:
    """Smallest pairwise distance in the subset."""
    s = _subset(kern, subset)
    if s.size < 2:
        raise DomainError("disparity-min needs at least two points")
    sub = kern.d[np.ix_(s, s)]
    return float(sub[np.triu_indices(s.size, 1)].min())


OBJECTIVES = {"logdet": logdet_value, "disparity_sum": disparity_sum,
              "disparity_min": disparity_min}


def greedy_maximize(objective, kern: SimilarityKernel, k: int) -> list:
    """Greedy maximisation of a set function, ties broken toward the lowest index.

    ``objective`` is a callable ``f(kern, subset)`` or one of the names in
    ``OBJECTIVES``. Disparity-min starts from the farthest pair since it is
    undefined on singletons.
    """
    if isinstance(objective, str):
        if objective not in OBJECTIVES:
            raise DomainError(f"unknown objective {objective!r}")
        objective = OBJECTIVES[objective]
    n = kern.n
    if not 0 <= k <= n:
        raise DomainError(f"k={k} must lie in [0, n={n}]")
    chosen: list = []
    if objective is disparity_min and k >= 2:
        d = np.where(np.triu(np.ones((n, n), bool), 1), kern.d, -np.inf)
        i, j = np.unravel_index(int(np.argmax(d)), d.shape)
        chosen = [int(i), int(j)]
    elif objective is disparity_min and k == 1:
        return [0]
    while len(chosen) < k:
        best_val, best_j = -np.inf, None
        for j in range(n):
            if j in chosen:
                continue
            val = objective(kern, chosen + [j])
            if best_j is None or val > best_val:
                best_val, best_j = val, j
        chosen.append(best_j)
    return sorted(chosen)


def random_subset(n, k, seed) -> np.ndarray:
    """``k`` distinct indices drawn uniformly from ``range(n)``, sorted."""
    if not 0 <= k <= n:
        raise DomainError(f"k={k} must lie in [0, n={n}]")
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))


def make_selector(name: str, k_fraction: float, seed: int = 0) -> Callable:
    """Selector ``f(data, client_id) -> indices`` for ``fedavg_run``.

    ``name`` is ``random`` or one of the greedy objectives. Greedy selectors
    build the kernel on the concatenated inputs and (scaled) targets.
    """
    if name != "random" and name not in OBJECTIVES:
        raise DomainError(f"unknown selector {name!r}")

    def select(data: LabeledDataset, client_id: int):
        k = max(1, int(round(k_fraction * len(data))))
        if name == "random":
            return random_subset(len(data), k, [seed, client_id])
        feats = data.x if data.is_classification else np.hstack([data.x, data.y])
        return np.asarray(greedy_maximize(name, SimilarityKernel.from_points(feats), k))
    return select


@dataclass
class FedAvgConfig:
    rounds: int = 50
    local_rounds: int = 20
    batch_size: int = 100
    lr: float = 0.05
    clients_per_round: Optional[int] = None
    seed: int = 0


def local_sgd(spec: NetworkSpec, theta, data: LabeledDataset, steps, batch_size, lr, rng):
    """Minibatch SGD on the mean negative log-likelihood."""
    theta = np.array(theta, dtype=float)
    n = len(data)
    b = min(batch_size, n)
    for _ in range(steps):
        idx = rng.choice(n, size=b, replace=False)
        _, g = loglik_theta_grad(spec, theta, data.x[idx], data.y[idx], np.full(b, 1.0 / b))
        theta += lr * g
    return theta


def fedavg_run(spec: NetworkSpec, clients, cfg: FedAvgConfig,
               subset_selector: Optional[Callable] = None,
               test: Optional[LabeledDataset] = None, theta0=None):
    """Federated averaging of a point-estimate network.

    ``clients`` is a list of ``LabeledDataset``. Each round every selected
    client runs ``local_rounds`` SGD steps from the global weights; the
    server averages the results weighted by client data size. Returns
    ``(MetricsTrace, theta)``.
    """
    if cfg.rounds < 0 or cfg.local_rounds < 0:
        raise DomainError("rounds must be nonnegative")
    if not clients:
        raise DomainError("need at least one client")
    datasets = list(clients)
    if subset_selector is not None:
        datasets = [d.subset(subset_selector(d, i)) for i, d in enumerate(datasets)]
    for d in datasets:
        d.check_against(spec)
    N = len(datasets)
    S = cfg.clients_per_round or N
    if not 1 <= S <= N:
        raise DomainError("clients_per_round must lie in [1, N]")
    if theta0 is None:
        theta0 = init_variational(spec, np.random.default_rng([cfg.seed, 0])).mu
    theta = np.array(theta0, dtype=float)
    trace = MetricsTrace()
    metric = "mse" if spec.likelihood == "gaussian" else "accuracy"

    def log(t):
        if test is not None:
            for name, val in evaluate(spec, theta, test).items():
                trace.add(t, GLOBAL_CLIENT, "test", f"global_{name}", val)
        for i, d in enumerate(datasets):
            trace.add(t, i, "train", f"train_{metric}", evaluate(spec, theta, d)[metric])

    log(0)
    sizes = np.array([len(d) for d in datasets], dtype=float)
    for t in range(cfg.rounds):
        sel = np.sort(np.random.default_rng([cfg.seed, 1, t]).choice(N, S, replace=False))
        updates = [local_sgd(spec, theta, datasets[i], cfg.local_rounds, cfg.batch_size,
                             cfg.lr, np.random.default_rng([cfg.seed, 2, t, i]))
                   for i in sel]
        w = sizes[sel] / sizes[sel].sum()
        theta = np.sum([wi * u for wi, u in zip(w, updates)], axis=0)
        log(t + 1)
    return trace, theta
