"""Command line entry point: ``coreset-fed <subcommand> [flags]``.

Subcommands
-----------
data-gen       write each client's data (and the pooled test set) as CSV
fed-run        run federated training (modes coreset, full, random_subset)
baseline-run   run FedAvg on full data or on a selected subset
coreset-solve  run A-IHT on an embedding read from CSV
theory-check   print drift flags and minimax envelopes over a size grid

Flags given on the command line override values from ``--config``.
Every error path exits with a nonzero status.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .coreset import LikelihoodEmbedding, aiht_solve
from .data import export_csv
from .exceptions import ConfigError, CoresetFedError
from .runner import build_federation, run_experiment
from .theory import DEFAULT_ARCHITECTURES, theory_grid

FED_MODES = ("coreset", "full", "random_subset")


def _add_common(p, with_mode=True):
    p.add_argument("--config", metavar="PATH", help="sectioned key = value config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--k-fraction", type=float, dest="k_fraction",
                   help="coreset budget as a fraction of each client's data")
    p.add_argument("--rounds", type=int, help="number of global rounds")
    if with_mode:
        p.add_argument("--mode", metavar="NAME", help="training mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coreset-fed", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data-gen", help="generate and partition data, write CSV files")
    _add_common(p, with_mode=False)

    p = sub.add_parser("fed-run", help="federated variational training")
    _add_common(p)

    p = sub.add_parser("baseline-run", help="FedAvg with optional subset selection")
    _add_common(p)

    p = sub.add_parser("coreset-solve", help="A-IHT on a CSV embedding")
    p.add_argument("--phi", required=True, metavar="PATH",
                   help="CSV matrix with one row per sample and one column per point")
    p.add_argument("--target", metavar="PATH",
                   help="CSV column with the target vector (default: row sums of phi)")
    p.add_argument("--k", type=int, required=True, help="sparsity budget")
    p.add_argument("--max-iter", type=int, default=10, dest="max_iter")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", metavar="DIR", help="write weights.csv and result.json here")

    p = sub.add_parser("theory-check", help="drift and envelope table as CSV")
    p.add_argument("--delta", type=float, default=1.5)
    p.add_argument("--delta-prime", type=float, default=2.0, dest="delta_prime")
    p.add_argument("--ratio", type=float, default=0.5, help="n_k / n")
    p.add_argument("--out", metavar="DIR", help="also write theory.csv here")
    return parser


def _overrides(args, mode_default=None):
    ov = {
        "experiment.seed": args.seed,
        "federated.k_fraction": args.k_fraction,
        "federated.rounds": args.rounds,
        "experiment.output_dir": args.out,
    }
    mode = getattr(args, "mode", None)
    if mode is not None:
        ov["experiment.mode"] = mode
    elif mode_default is not None and args.config is None:
        ov["experiment.mode"] = mode_default
    return ov


def _cmd_data_gen(args):
    cfg = load_config(args.config, _overrides(args)).check()
    out = Path(args.out or cfg.experiment.output_dir or ".")
    fed = build_federation(cfg)
    out.mkdir(parents=True, exist_ok=True)
    for c in fed.clients:
        export_csv(c.data, out / f"client_{c.id}_train.csv")
        if c.test is not None:
            export_csv(c.test, out / f"client_{c.id}_test.csv")
    export_csv(fed.test, out / "test.csv")
    print(f"wrote {len(fed.clients)} client files to {out}")
    return 0


def _cmd_run(args, allowed):
    cfg = load_config(args.config, _overrides(args, mode_default=allowed[0]))
    family, _ = cfg.mode_parts()
    if family not in allowed:
        raise ConfigError(f"mode {cfg.experiment.mode!r} is not valid here; "
                          f"expected one of {allowed}")
    cfg.check()
    trace, summary = run_experiment(cfg)
    final = {r.metric: r.value for r in trace.rows if r.client_id == -1}
    print(json.dumps({"mode": cfg.experiment.mode, "rows": len(trace), "final": final},
                     sort_keys=True))
    return 0


def _read_matrix(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise CoresetFedError(f"cannot read {path}: {exc}") from None
    try:
        return np.array(rows, dtype=float)
    except ValueError:
        # tolerate a header row
        return np.array(rows[1:], dtype=float)


def _cmd_coreset_solve(args):
    phi = _read_matrix(args.phi)
    if args.target:
        emb = LikelihoodEmbedding(phi, _read_matrix(args.target).reshape(-1))
    else:
        emb = LikelihoodEmbedding.from_phi(phi)
    res = aiht_solve(emb, args.k, max_iter=args.max_iter, tol=args.tol)
    result = {"objective": res.objective, "n_iter": res.n_iter, "converged": res.converged,
              "support": res.weights.support.tolist(), "weights": res.weights.w.tolist()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "weights.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "weight"])
            for j, v in enumerate(res.weights.w):
                w.writerow([j, repr(float(v))])
        (out / "result.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(result))
    return 0


def _cmd_theory(args):
    rows = theory_grid(ratio=args.ratio, architectures=DEFAULT_ARCHITECTURES,
                       delta=args.delta, delta_prime=args.delta_prime)
    cols = list(rows[0])
    lines = [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "theory.csv").write_text(text, encoding="utf-8")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code not in (None, 0) else 0
    try:
        if args.command == "data-gen":
            return _cmd_data_gen(args)
        if args.command == "fed-run":
            return _cmd_run(args, FED_MODES)
        if args.command == "baseline-run":
            return _cmd_run(args, ("fedavg", "submodular"))
        if args.command == "coreset-solve":
            return _cmd_coreset_solve(args)
        if args.command == "theory-check":
            return _cmd_theory(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CoresetFedError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
