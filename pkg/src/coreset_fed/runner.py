"""Wire a configuration into data, clients, a training run and metric files."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .baselines import FedAvgConfig, fedavg_run, make_selector
from .bnn import LabeledDataset, NetworkSpec
from .config import ExperimentConfig
from .data import embed_vectors, load_idx_dataset, partition_noniid, synth_regression
from .federated import ClientState, FedConfig, run_federated
from .metrics import MetricsTrace, emit_metrics


@dataclass
class Federation:
    spec: NetworkSpec
    clients: list          # list of ClientState (train data + personal test data)
    test: LabeledDataset   # pooled test set for the global model


def _bins(values, edges):
    return np.searchsorted(edges, values, side="right")


def _split_clients(train, test, train_groups, test_groups, plan_assign):
    clients = []
    for cid, idx in enumerate(plan_assign):
        groups = np.unique(train_groups[idx])
        test_idx = np.flatnonzero(np.isin(test_groups, groups))
        client_test = test.subset(test_idx) if test_idx.size else None
        clients.append(ClientState(cid, train.subset(idx), test=client_test))
    return clients


def build_federation(cfg: ExperimentConfig) -> Federation:
    """Generate or load data and deal it to clients with the shard partition.

    Regression targets are partitioned by quantile bins of the first input
    coordinate, so each client sees a contiguous slab of the input space.
    Each client's personal test set holds the test points that fall in its
    bins (or carry its labels).
    """
    d, m = cfg.data, cfg.model
    N, c = cfg.federated.n_clients, d.classes_per_client
    seed = cfg.experiment.seed
    if d.kind == "synthetic":
        f_spec = {"kind": d.function, "params": {"freq": d.freq}}
        train = synth_regression(f_spec, d.n, d.s0, d.noise, seed=seed)
        test = synth_regression(f_spec, d.n_test, d.s0, d.noise, seed=seed + 100003)
        edges = np.quantile(train.x[:, 0], np.linspace(0, 1, N * c + 1)[1:-1])
        train_groups = _bins(train.x[:, 0], edges)
        test_groups = _bins(test.x[:, 0], edges)
        spec = NetworkSpec((d.s0, *cfg.hidden_sizes, 1), activation=m.activation,
                           likelihood="gaussian", sigma_eps=m.sigma_eps)
    else:
        full = load_idx_dataset(d.idx_images, d.idx_labels, limit=d.limit, seed=seed)
        if d.idx_test_images and d.idx_test_labels:
            train = full
            test = load_idx_dataset(d.idx_test_images, d.idx_test_labels, seed=seed)
        else:
            perm = np.random.default_rng([seed, 11]).permutation(len(full))
            n_test = max(1, int(round(d.test_fraction * len(full))))
            test, train = full.subset(np.sort(perm[:n_test])), full.subset(np.sort(perm[n_test:]))
        if d.embed_dim:
            train = LabeledDataset(embed_vectors(train.x, d.embed_dim, seed=seed), train.y)
            test = LabeledDataset(embed_vectors(test.x, d.embed_dim, seed=seed), test.y)
        train_groups, test_groups = train.y, test.y
        n_classes = int(max(train.y.max(), test.y.max())) + 1
        spec = NetworkSpec((train.x.shape[1], *cfg.hidden_sizes, n_classes),
                           activation=m.activation, likelihood="categorical")
    plan = partition_noniid(train_groups, N, c, seed=seed)
    clients = _split_clients(train, test, train_groups, test_groups, plan.assignments)
    return Federation(spec, clients, test)


def fed_config(cfg: ExperimentConfig) -> FedConfig:
    f, a = cfg.federated, cfg.aiht
    return FedConfig(
        rounds=f.rounds, local_rounds=f.local_rounds,
        clients_per_round=f.clients_per_round or None, beta=f.beta,
        batch_size=f.batch_size, mc_samples=f.mc_samples, zeta=f.zeta,
        eta1=f.eta1, eta2=f.eta2, k_fraction=f.k_fraction, n_snapshots=f.n_snapshots,
        outer_loops=f.outer_loops, outer_tol=f.outer_tol, refresh_every=f.refresh_every,
        aiht_max_iter=a.max_iter, aiht_tol=a.tol, kl_mode=a.kl_mode, rho0=cfg.model.rho0,
        optimizer=f.optimizer, seed=cfg.experiment.seed, threads=f.threads or None)


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None):
    """Validate, run and (when an output directory is set) persist one experiment.

    Returns ``(MetricsTrace, summary dict)``. Validation errors are raised
    before any data is generated or any file is written.
    """
    cfg.check()
    out_dir = out_dir if out_dir is not None else (cfg.experiment.output_dir or None)
    t0 = time.perf_counter()
    fed = build_federation(cfg)
    family, selector = cfg.mode_parts()
    if family in ("coreset", "full", "random_subset"):
        trace, _, _ = run_federated(fed.spec, fed.clients, fed_config(cfg), mode=family,
                                    test=fed.test, record_time=cfg.experiment.record_time)
    else:
        f = cfg.federated
        fcfg = FedAvgConfig(rounds=f.rounds, local_rounds=f.local_rounds,
                            batch_size=f.batch_size, lr=cfg.fedavg.lr,
                            clients_per_round=f.clients_per_round or None,
                            seed=cfg.experiment.seed)
        sel = None if selector is None else make_selector(selector, f.k_fraction,
                                                          cfg.experiment.seed)
        trace, _ = fedavg_run(fed.spec, [c.data for c in fed.clients], fcfg,
                              subset_selector=sel, test=fed.test)
    summary = {
        "mode": cfg.experiment.mode,
        "seed": cfg.experiment.seed,
        "n_clients": len(fed.clients),
        "client_sizes": [c.n for c in fed.clients],
        "n_params": fed.spec.n_params,
        "wall_seconds": time.perf_counter() - t0,
    }
    if out_dir:
        emit_metrics(trace, out_dir, config=cfg.to_dict(), summary=summary)
    return trace, summary
