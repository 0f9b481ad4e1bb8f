"""Coreset-weighted personalised federated variational training.

The server keeps a global mean-field Gaussian ``v``. Every round each client
refits two local posteriors starting from ``v``: ``q_hat`` on its full data
and ``q_hat_w`` on its coreset-weighted data, while pulling a localised copy
of the global distribution towards ``q_hat_w``. The client then refreshes its
coreset weights with A-IHT on a log-likelihood embedding drawn from
``q_hat``. The server blends the localised copies of a random subset of
clients into ``v``.

All randomness is derived from ``(seed, client_id, round, stream)`` so results
do not depend on the order or parallelism in which clients run.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .bnn import (
    LabeledDataset, NetworkSpec, elbo_value_and_grad, evaluate, init_variational,
)
from .coreset import (
    CoresetWeights, aiht_solve, aiht_solve_with_kl, build_embedding, combined_objective,
)
from .exceptions import DimensionError, DomainError
from .metrics import MetricsTrace
from .variational import (
    MeanFieldGaussian, kl_diag_gauss, kl_diag_gauss_grad, reparameterize,
)

MODES = ("coreset", "full", "random_subset")

# stream ids for derived generators
_SAMPLE_CLIENTS, _LOCAL, _SNAPSHOTS, _SUBSET, _INIT = range(5)


def derive_rng(seed, client_id, round_, stream) -> np.random.Generator:
    """Independent generator for one (client, round, purpose) triple."""
    key = [int(seed) & 0xFFFFFFFF, int(client_id) + 1, int(round_) + 1, int(stream)]
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass
class FedConfig:
    rounds: int = 50
    local_rounds: int = 20
    clients_per_round: Optional[int] = None
    beta: float = 1.0
    batch_size: int = 100
    mc_samples: int = 1
    zeta: float = 10.0
    eta1: float = 1e-3
    eta2: float = 1e-3
    k_fraction: float = 0.5
    n_snapshots: int = 32
    outer_loops: int = 3
    outer_tol: float = 1e-6
    refresh_every: int = 1
    aiht_max_iter: int = 10
    aiht_tol: float = 1e-6
    kl_mode: str = "monitor"
    rho0: float = -3.0
    optimizer: str = "sgd"
    seed: int = 0
    threads: Optional[int] = None

    def validate(self, n_clients=None):
        errors = []
        for name in ("local_rounds", "batch_size", "mc_samples", "n_snapshots",
                     "outer_loops", "refresh_every", "aiht_max_iter"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.rounds < 0:
            errors.append("rounds must be >= 0")
        if not 0 < self.beta <= 1:
            errors.append("beta must lie in (0, 1]")
        if not 0 < self.k_fraction <= 1:
            errors.append("k_fraction must lie in (0, 1]")
        if not self.zeta > 0:
            errors.append("zeta must be positive")
        if not (self.eta1 > 0 and self.eta2 > 0):
            errors.append("learning rates must be positive")
        if self.optimizer not in OPTIMIZERS:
            errors.append(f"optimizer must be one of {OPTIMIZERS}")
        if self.kl_mode not in ("monitor", "finite_difference"):
            errors.append("kl_mode must be 'monitor' or 'finite_difference'")
        if n_clients is not None and self.clients_per_round is not None:
            if not 1 <= self.clients_per_round <= n_clients:
                errors.append("clients_per_round must lie in [1, N]")
        return errors


@dataclass
class ClientState:
    id: int
    data: LabeledDataset
    zeta: float = 10.0
    weights: Optional[CoresetWeights] = None
    v_local: Optional[MeanFieldGaussian] = None
    v_local_w: Optional[MeanFieldGaussian] = None
    test: Optional[LabeledDataset] = None

    def __post_init__(self):
        if not self.zeta > 0:
            raise DomainError("zeta must be positive")
        if self.weights is not None and self.weights.n != len(self.data):
            raise DimensionError("coreset weights do not match the client data size")

    @property
    def n(self) -> int:
        return len(self.data)


@dataclass
class ServerState:
    v_global: MeanFieldGaussian
    round: int
    config: FedConfig


@dataclass
class CoresetUpdate:
    v_z: MeanFieldGaussian
    weights: Optional[CoresetWeights]
    q_hat: MeanFieldGaussian
    q_hat_w: MeanFieldGaussian
    f_trace: list = field(default_factory=list)
    kl: float = 0.0
    quadratic: float = float("nan")
    fallback: bool = False


def sample_clients(n_clients, n_selected, rng_seed) -> np.ndarray:
    """Uniform subset of ``n_selected`` client indices, sorted."""
    if not 1 <= n_selected <= n_clients:
        raise DomainError(f"cannot select {n_selected} of {n_clients} clients")
    rng = np.random.default_rng(rng_seed)
    return np.sort(rng.choice(n_clients, size=n_selected, replace=False))


def weighted_minibatch(data: LabeledDataset, w, b, rng_seed):
    """Draw a minibatch from the coreset ``w`` with per-point effective weights.

    Points are drawn with probability proportional to ``w`` (uniform weights
    sample without replacement when the support is large enough). Every drawn
    point carries the effective weight ``sum(w) / n`` so that the ELBO
    estimator with its ``n / b`` prefactor is unbiased for the coreset
    weighted log-likelihood ``sum_j w_j log p(D_j)``.

    Returns ``(indices, effective_weights)``.
    """
    wv = w.w if isinstance(w, CoresetWeights) else np.asarray(w, dtype=float)
    n = len(data)
    if wv.size != n:
        raise DimensionError(f"weights have length {wv.size}, data has {n} points")
    if np.any(wv < 0):
        raise DomainError("coreset weights must be nonnegative")
    support = np.flatnonzero(wv)
    if support.size == 0:
        raise DomainError("empty coreset: all weights are zero")
    rng = np.random.default_rng(rng_seed)
    total = wv.sum()
    ws = wv[support]
    if np.all(ws == ws[0]):
        replace_ = support.size < b
        idx = rng.choice(support, size=b, replace=replace_)
    else:
        idx = rng.choice(support, size=b, replace=True, p=ws / total)
    return idx, np.full(b, total / n)


OPTIMIZERS = ("sgd", "adam")


class Optimizer:
    """Plain SGD, or Adam with bias correction; state lives for one local fit."""

    def __init__(self, kind, eta, beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in OPTIMIZERS:
            raise DomainError(f"unknown optimizer {kind!r}")
        self.kind, self.eta = kind, eta
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = self.s = None
        self.t = 0

    def step(self, v: MeanFieldGaussian, grad) -> MeanFieldGaussian:
        if self.kind == "sgd":
            return MeanFieldGaussian.from_flat(v.flat() - self.eta * grad)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.s = np.zeros_like(grad)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.s = self.b2 * self.s + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        s_hat = self.s / (1 - self.b2 ** self.t)
        return MeanFieldGaussian.from_flat(v.flat() - self.eta * m_hat / (np.sqrt(s_hat) + self.eps))


def client_update(spec: NetworkSpec, client: ClientState, v_global: MeanFieldGaussian,
                  R, b, K, eta1, eta2, rng_seed, weights=None, optimizer="sgd"):
    """Local variational training for one client.

    Each local round takes

    1. an unweighted ELBO step on ``q_hat`` (full-data minibatch, prior
       ``v_global``);
    2. a coreset-weighted ELBO step on ``q_hat_w`` (prior: the localised
       global copy ``v_z``);
    3. a step on ``v_z`` descending ``zeta * KL(q_hat_w || v_z)``.

    ``weights=None`` means every point has weight one. ``optimizer`` is
    ``"sgd"`` or ``"adam"``; optimizer state is local to this call. Returns
    ``(v_z, q_hat, q_hat_w)``; with ``R == 0`` all three equal ``v_global``.
    """
    rng = np.random.default_rng(rng_seed)
    data = client.data
    n = len(data)
    T = v_global.size
    zeta = client.zeta
    if weights is None:
        wv = np.ones(n)
    else:
        wv = weights.w if isinstance(weights, CoresetWeights) else np.asarray(weights, float)
    q = v_global
    q_w = v_global
    v_z = v_global
    bb = min(b, n)
    opt_q = Optimizer(optimizer, eta1)
    opt_w = Optimizer(optimizer, eta1)
    opt_z = Optimizer(optimizer, eta2)
    for _ in range(R):
        idx = rng.choice(n, size=bb, replace=False)
        noise = rng.standard_normal((K, T))
        _, g = elbo_value_and_grad(spec, q, v_global, (data.x[idx], data.y[idx]),
                                   None, n, zeta, noise)
        q = opt_q.step(q, g)

        idx_w, eff = weighted_minibatch(data, wv, bb, rng)
        noise = rng.standard_normal((K, T))
        _, g = elbo_value_and_grad(spec, q_w, v_z, (data.x[idx_w], data.y[idx_w]),
                                   eff, n, zeta, noise)
        q_w = opt_w.step(q_w, g)

        g_z = zeta * kl_diag_gauss_grad(q_w, v_z, wrt="z")
        v_z = opt_z.step(v_z, g_z)
    return v_z, q, q_w


def _budget(cfg: FedConfig, n: int) -> int:
    return max(1, int(round(cfg.k_fraction * n)))


def coreset_opt_update(spec: NetworkSpec, client: ClientState, v_global: MeanFieldGaussian,
                       cfg: FedConfig, round_: int = 0) -> CoresetUpdate:
    """Alternate local training and A-IHT coreset refreshes for one client.

    Each outer loop retrains from ``v_global`` with the current weights,
    rebuilds the embedding from draws of ``q_hat``, evaluates the combined
    objective ``KL(q_hat_w || q_hat) + ||P - Phi w||^2`` and runs one A-IHT
    pass warm-started from the current weights. The loop keeps the state
    with the lowest objective, so the recorded objective trace never
    increases; it stops when the improvement drops below ``cfg.outer_tol``
    or after ``cfg.outer_loops`` loops.
    """
    n = client.n
    k = _budget(cfg, n)
    weights = client.weights
    best = None
    f_trace = []
    fallback = False
    for loop in range(cfg.outer_loops):
        seed_local = derive_rng(cfg.seed, client.id, round_, _LOCAL * 16 + loop)
        v_z, q, q_w = client_update(spec, client, v_global, cfg.local_rounds,
                                    cfg.batch_size, cfg.mc_samples, cfg.eta1, cfg.eta2,
                                    seed_local, weights=weights, optimizer=cfg.optimizer)
        snap_rng = derive_rng(cfg.seed, client.id, round_, _SNAPSHOTS * 16 + loop)
        snapshots = reparameterize(q, snap_rng.standard_normal((cfg.n_snapshots, q.size)))
        emb = build_embedding(spec, snapshots, client.data)
        w_now = np.ones(n) if weights is None else weights.w
        f = combined_objective(w_now, q_w, q, emb)

        if best is not None and f["value"] > best.f_trace[-1] - cfg.outer_tol:
            break

        if cfg.kl_mode == "finite_difference":
            def retrain(wv, _seed=seed_local):
                if not np.any(wv > 0):
                    return 0.0
                _, qq, qqw = client_update(spec, client, v_global, cfg.local_rounds,
                                           cfg.batch_size, cfg.mc_samples, cfg.eta1,
                                           cfg.eta2, _seed, weights=wv, optimizer=cfg.optimizer)
                return kl_diag_gauss(qqw, qq)
            res = aiht_solve_with_kl(emb, k, retrain, max_iter=cfg.aiht_max_iter,
                                     tol=cfg.aiht_tol,
                                     w0=None if weights is None else weights.w)
        else:
            res = aiht_solve(emb, k, max_iter=cfg.aiht_max_iter, tol=cfg.aiht_tol,
                             w0=None if weights is None else weights.w)
        new_weights = res.weights
        loop_fallback = not np.any(new_weights.w > 0)
        if loop_fallback:
            new_weights = weights
        fallback = fallback or loop_fallback
        f_trace.append(f["value"])
        best = CoresetUpdate(v_z, new_weights, q, q_w, list(f_trace), f["kl"],
                             f["quadratic"], fallback)
        weights = new_weights
        if weights is None:
            break
    return best


def aggregate(v_t: MeanFieldGaussian, updates, beta) -> MeanFieldGaussian:
    """``(1 - beta) v_t + beta * mean(updates)`` on ``(mu, rho)``."""
    updates = list(updates)
    if not updates:
        raise DomainError("need at least one client update to aggregate")
    for u in updates:
        if u.size != v_t.size:
            raise DimensionError(f"update has {u.size} parameters, expected {v_t.size}")
    mean_mu = np.mean([u.mu for u in updates], axis=0)
    mean_rho = np.mean([u.rho for u in updates], axis=0)
    return MeanFieldGaussian((1 - beta) * v_t.mu + beta * mean_mu,
                             (1 - beta) * v_t.rho + beta * mean_rho)


def _primary_metric(spec):
    return "mse" if spec.likelihood == "gaussian" else "accuracy"


def resolve_threads(threads=None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("CORESET_FED_THREADS")
    if env:
        return max(1, int(env))
    return 1


def _fixed_subset_weights(client: ClientState, cfg: FedConfig) -> CoresetWeights:
    k = _budget(cfg, client.n)
    rng = derive_rng(cfg.seed, client.id, -1, _SUBSET)
    idx = rng.choice(client.n, size=k, replace=False)
    w = np.zeros(client.n)
    w[idx] = 1.0
    return CoresetWeights(w, k)


def run_federated(spec: NetworkSpec, clients, cfg: FedConfig, mode: str = "coreset",
                  test: Optional[LabeledDataset] = None, v0: Optional[MeanFieldGaussian] = None,
                  record_time: bool = False):
    """Run the server loop and return ``(MetricsTrace, final ServerState, clients)``.

    ``mode`` is ``coreset`` (A-IHT weights refreshed every ``refresh_every``
    rounds), ``full`` (all points, weight one) or ``random_subset`` (a fixed
    uniformly drawn ``k``-subset chosen once before training).
    """
    if mode not in MODES:
        raise DomainError(f"unknown mode {mode!r}; expected one of {MODES}")
    errors = cfg.validate(len(clients))
    if errors:
        raise DomainError("; ".join(errors))
    clients = [replace(c) for c in clients]
    for c in clients:
        c.data.check_against(spec)
        c.zeta = cfg.zeta
    N = len(clients)
    S = cfg.clients_per_round or N
    if v0 is None:
        v0 = init_variational(spec, derive_rng(cfg.seed, -1, -1, _INIT), rho0=cfg.rho0)
    if mode == "random_subset":
        for c in clients:
            c.weights = _fixed_subset_weights(c, cfg)
    trace = MetricsTrace(record_time=record_time)
    metric = _primary_metric(spec)
    server = ServerState(v0, 0, cfg)

    def log_eval(round_, v, client_rows):
        if test is not None:
            res = evaluate(spec, v.mu, test)
            for name, val in res.items():
                trace.add(round_, -1, "test", f"global_{name}", val)
        for c in clients:
            q = c.v_local if c.v_local is not None else v
            if c.test is not None:
                trace.add(round_, c.id, "test", f"personal_{metric}",
                          evaluate(spec, q.mu, c.test)[metric])
            for name, val in client_rows.get(c.id, {}).items():
                trace.add(round_, c.id, "train", name, val)

    log_eval(0, v0, {})
    n_threads = resolve_threads(cfg.threads)
    pool = ThreadPoolExecutor(max_workers=n_threads) if n_threads > 1 else None
    try:
        for t in range(cfg.rounds):
            t0 = time.perf_counter()
            v_t = server.v_global

            def work(c: ClientState):
                if mode == "coreset" and (c.weights is None or t % cfg.refresh_every == 0):
                    return coreset_opt_update(spec, c, v_t, cfg, t)
                seed_local = derive_rng(cfg.seed, c.id, t, _LOCAL * 16)
                v_z, q, q_w = client_update(spec, c, v_t, cfg.local_rounds, cfg.batch_size,
                                            cfg.mc_samples, cfg.eta1, cfg.eta2, seed_local,
                                            weights=c.weights, optimizer=cfg.optimizer)
                return CoresetUpdate(v_z, c.weights, q, q_w, [], kl_diag_gauss(q_w, q))

            if pool is None:
                results = [work(c) for c in clients]
            else:
                results = list(pool.map(work, clients))

            rows = {}
            for c, res in zip(clients, results):
                info = {"kl_qw_q": res.kl}
                if mode == "coreset":
                    old = c.weights
                    new = res.weights
                    if new is not None:
                        k = new.k
                        info["coreset_size"] = float(np.count_nonzero(new.w))
                        info["coreset_weight_sum"] = float(new.w.sum())
                        if old is not None:
                            churn = np.setxor1d(old.support, new.support).size
                            info["support_churn"] = churn / k
                    info["coreset_quadratic"] = res.quadratic
                    info["coreset_fallback"] = float(res.fallback)
                    c.weights = new
                c.v_local = res.q_hat
                c.v_local_w = res.q_hat_w
                rows[c.id] = info

            selected = sample_clients(N, S, derive_rng(cfg.seed, -1, t, _SAMPLE_CLIENTS))
            server = ServerState(aggregate(v_t, [results[i].v_z for i in selected], cfg.beta),
                                 t + 1, cfg)
            wall_ms = (time.perf_counter() - t0) * 1e3
            trace.set_wall_ms(wall_ms)
            log_eval(t + 1, server.v_global, rows)
            trace.set_wall_ms(0.0)
    finally:
        if pool is not None:
            pool.shutdown()
    return trace, server, clients
