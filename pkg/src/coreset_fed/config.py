"""Experiment configuration: sectioned ``key = value`` files.

Example::

    [experiment]
    mode = coreset
    seed = 0

    [data]
    kind = synthetic
    n = 150

    [federated]
    n_clients = 3
    rounds = 50

Precedence, lowest to highest: built-in defaults, the config file, command
line flags. Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .exceptions import ConfigError

BASE_MODES = ("coreset", "full", "random_subset", "fedavg")
SUBMODULAR_NAMES = ("logdet", "disparity_sum", "disparity_min", "random")


@dataclass
class ExperimentSection:
    mode: str = "coreset"
    seed: int = 0
    output_dir: str = ""
    record_time: bool = False


@dataclass
class DataSection:
    kind: str = "synthetic"
    n: int = 150
    n_test: int = 1000
    s0: int = 2
    noise: float = 0.3
    function: str = "sin"
    freq: float = 0.5
    classes_per_client: int = 2
    partition: str = "shards"
    idx_images: str = ""
    idx_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    limit: int = 3000
    test_fraction: float = 0.2
    embed_dim: int = 0


@dataclass
class ModelSection:
    hidden: str = "16"
    activation: str = "tanh"
    sigma_eps: float = 0.3
    rho0: float = -3.0


@dataclass
class FederatedSection:
    n_clients: int = 3
    rounds: int = 50
    local_rounds: int = 20
    clients_per_round: int = 0
    beta: float = 1.0
    batch_size: int = 100
    mc_samples: int = 1
    zeta: float = 10.0
    eta1: float = 3e-3
    eta2: float = 3e-3
    k_fraction: float = 0.5
    n_snapshots: int = 32
    outer_loops: int = 3
    outer_tol: float = 1e-6
    refresh_every: int = 1
    optimizer: str = "adam"
    threads: int = 0


@dataclass
class AIHTSection:
    max_iter: int = 50
    tol: float = 1e-6
    kl_mode: str = "monitor"


@dataclass
class FedAvgSection:
    lr: float = 0.05


SECTIONS = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "model": ModelSection,
    "federated": FederatedSection,
    "aiht": AIHTSection,
    "fedavg": FedAvgSection,
}


def _coerce(kind, raw, where):
    try:
        if kind is bool:
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    federated: FederatedSection = field(default_factory=FederatedSection)
    aiht: AIHTSection = field(default_factory=AIHTSection)
    fedavg: FedAvgSection = field(default_factory=FedAvgSection)

    @classmethod
    def from_text(cls, text: str, source="<string>") -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text, source=str(source))
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key, raw in parser.items(section):
                cfg.set(f"{section}.{key}", raw, where=f"{source} [{section}] {key}")
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        return cls.from_text(text, source=p)

    def set(self, dotted: str, raw, where=None):
        """Set ``section.key`` from a raw (string or typed) value."""
        where = where or dotted
        if "." not in dotted:
            raise ConfigError(f"{where}: expected section.key")
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"{where}: unknown section {section!r}")
        obj = getattr(self, section)
        types = {f.name: f.type for f in fields(obj)}
        if key not in types:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        kind = {"int": int, "float": float, "str": str, "bool": bool}[types[key]]
        setattr(obj, key, _coerce(kind, raw, where))

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in asdict(getattr(self, name)).items():
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @property
    def hidden_sizes(self) -> tuple:
        text = self.model.hidden.strip()
        if not text:
            return ()
        return tuple(int(h) for h in text.replace(" ", "").split(","))

    def mode_parts(self):
        """``(family, selector)``: selector is set only for submodular modes."""
        mode = self.experiment.mode
        if mode.startswith("submodular:"):
            return "submodular", mode.split(":", 1)[1]
        return mode, None

    def validate(self) -> list:
        """Every validation error, in a stable order; empty when valid."""
        e = []
        fam, sel = self.mode_parts()
        if fam == "submodular":
            if sel not in SUBMODULAR_NAMES:
                e.append(f"experiment.mode: unknown selector {sel!r}; expected one of "
                         f"{SUBMODULAR_NAMES}")
        elif fam not in BASE_MODES:
            e.append(f"experiment.mode: unknown mode {fam!r}")
        d, m, f, a = self.data, self.model, self.federated, self.aiht
        if d.kind not in ("synthetic", "idx"):
            e.append("data.kind must be 'synthetic' or 'idx'")
        if d.kind == "synthetic":
            if d.n < 1 or d.n_test < 1:
                e.append("data.n and data.n_test must be >= 1")
            if d.s0 < 1:
                e.append("data.s0 must be >= 1")
            if d.noise < 0:
                e.append("data.noise must be nonnegative")
            if d.function not in ("sin", "poly", "planted_mlp"):
                e.append("data.function must be sin, poly or planted_mlp")
        else:
            if not d.idx_images or not d.idx_labels:
                e.append("data.idx_images and data.idx_labels are required for idx data")
            if d.limit < 1:
                e.append("data.limit must be >= 1")
            if not 0 < d.test_fraction < 1:
                e.append("data.test_fraction must lie in (0, 1)")
        if d.partition not in ("shards", "dirichlet"):
            e.append("data.partition must be 'shards' or 'dirichlet'")
        elif d.partition == "dirichlet":
            e.append("data.partition 'dirichlet' is not implemented")
        if d.classes_per_client < 1:
            e.append("data.classes_per_client must be >= 1")
        try:
            hs = self.hidden_sizes
            if any(h < 1 for h in hs):
                e.append("model.hidden sizes must be positive")
        except ValueError:
            e.append(f"model.hidden: cannot parse {m.hidden!r}")
        if m.activation not in ("tanh", "relu", "sigmoid"):
            e.append("model.activation must be tanh, relu or sigmoid")
        if not m.sigma_eps > 0:
            e.append("model.sigma_eps must be positive")
        for name in ("n_clients", "local_rounds", "batch_size", "mc_samples", "n_snapshots",
                     "outer_loops", "refresh_every"):
            if getattr(f, name) < 1:
                e.append(f"federated.{name} must be >= 1")
        if f.rounds < 0:
            e.append("federated.rounds must be >= 0")
        if not 0 < f.beta <= 1:
            e.append("federated.beta must lie in (0, 1]")
        if not 0 < f.k_fraction <= 1:
            e.append("federated.k_fraction must lie in (0, 1]")
        if not f.zeta > 0:
            e.append("federated.zeta must be positive")
        if not (f.eta1 > 0 and f.eta2 > 0):
            e.append("federated.eta1 and federated.eta2 must be positive")
        if f.optimizer not in ("sgd", "adam"):
            e.append("federated.optimizer must be 'sgd' or 'adam'")
        if f.clients_per_round < 0 or f.clients_per_round > f.n_clients:
            e.append("federated.clients_per_round must lie in [0, n_clients] (0 means all)")
        if f.threads < 0:
            e.append("federated.threads must be >= 0")
        if a.max_iter < 1:
            e.append("aiht.max_iter must be >= 1")
        if not a.tol > 0:
            e.append("aiht.tol must be positive")
        if a.kl_mode not in ("monitor", "finite_difference"):
            e.append("aiht.kl_mode must be 'monitor' or 'finite_difference'")
        if not self.fedavg.lr > 0:
            e.append("fedavg.lr must be positive")
        # every client must be able to hold at least one coreset point
        pool = d.n if d.kind == "synthetic" else int(d.limit * (1 - d.test_fraction))
        if f.n_clients >= 1 and 0 < f.k_fraction <= 1:
            min_client = pool // (f.n_clients * max(d.classes_per_client, 1)) * max(
                d.classes_per_client, 1)
            if min_client < 1:
                e.append("data too small: some clients would receive no points")
            elif f.k_fraction * min_client < 1:
                e.append(f"k_fraction * smallest client size ({min_client}) is below 1")
        return e

    def check(self):
        errors = self.validate()
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        return self


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Defaults, then ``path``, then ``overrides`` (``{"section.key": value}``)."""
    cfg = ExperimentConfig.from_file(path) if path else ExperimentConfig()
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg.set(key, value, where=f"override {key}")
    return cfg
