"""Synthetic regression data, non-iid client partitions and IDX image files."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bnn import LabeledDataset, NetworkSpec, forward_batch
from .exceptions import DimensionError, DomainError, IDXParseError

IDX_UBYTE = 0x08
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# regression function families


def _f_sin(x, params):
    freq = params.get("freq", 1.0)
    if x.shape[1] >= 2:
        return np.sin(2 * np.pi * freq * x[:, 0]) * x[:, 1]
    return np.sin(2 * np.pi * freq * x[:, 0])


def _f_poly(x, params):
    coefs = np.asarray(params.get("coefs", [0.0, 1.0, -0.5]), dtype=float)
    # sum_d sum_p c_p x_d^p
    powers = np.stack([x ** p for p in range(coefs.size)], axis=-1)
    return (powers @ coefs).sum(axis=1)


def _f_planted_mlp(x, params):
    spec = params["spec"]
    return forward_batch(spec, params["theta"], x)[:, 0]


REGRESSION_KINDS = {"sin": _f_sin, "poly": _f_poly, "planted_mlp": _f_planted_mlp}


def regression_function(kind="sin", params=None, s0=2, seed=0):
    """Return ``f(X) -> (n,)`` for a named family.

    ``planted_mlp`` draws a random teacher network ``s0 -> hidden -> 1`` from
    ``seed`` unless ``params`` carries ``spec`` and ``theta``.
    """
    params = dict(params or {})
    if kind not in REGRESSION_KINDS:
        raise DomainError(f"unknown regression function {kind!r}")
    if kind == "planted_mlp" and "theta" not in params:
        spec = NetworkSpec((s0, int(params.get("hidden", 8)), 1))
        rng = np.random.default_rng([seed, 7])
        params["spec"] = spec
        params["theta"] = rng.normal(0.0, 1.0, spec.n_params)
    fn = REGRESSION_KINDS[kind]
    return lambda X: fn(np.atleast_2d(np.asarray(X, dtype=float)), params)


def synth_regression(f_spec=None, n=500, s0=2, sigma_eps=0.1, seed=0) -> LabeledDataset:
    """Random-covariate regression ``y = f(x) + eps`` with ``x ~ U[-1, 1]^s0``.

    ``f_spec`` is ``{"kind": "sin" | "poly" | "planted_mlp", "params": {...}}``.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    if s0 < 1:
        raise DomainError("s0 must be >= 1")
    if sigma_eps < 0:
        raise DomainError("sigma_eps must be nonnegative")
    f_spec = f_spec or {"kind": "sin"}
    f = regression_function(f_spec.get("kind", "sin"), f_spec.get("params"), s0, seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, s0))
    fx = f(x)
    y = fx + sigma_eps * rng.standard_normal(n)
    return LabeledDataset(x, y[:, None], {"f_spec": f_spec, "sigma_eps": sigma_eps,
                                          "f_values": fx})


@dataclass(frozen=True)
class PartitionPlan:
    assignments: tuple
    classes_per_client: int
    seed: int

    def __post_init__(self):
        parts = tuple(np.asarray(a, dtype=np.int64) for a in self.assignments)
        allidx = np.concatenate(parts) if parts else np.empty(0, np.int64)
        if np.unique(allidx).size != allidx.size:
            raise DomainError("client index lists overlap")
        object.__setattr__(self, "assignments", parts)

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def apply(self, data: LabeledDataset):
        return [data.subset(a) for a in self.assignments]


def partition_noniid(labels, n_clients, classes_per_client, seed=0,
                     method="shards") -> PartitionPlan:
    """Shard partition: sort by label, cut into ``N * c`` shards, deal ``c`` per client.

    Shards are dealt so that no client receives two shards of the same label
    when that is possible, which gives each client ``c`` distinct labels
    whenever the label counts allow it. Real-valued labels (regression) are
    binned into ``N * c`` quantile bins first.
    """
    if method == "dirichlet":
        raise NotImplementedError("Dirichlet partitioning is not implemented; use shards")
    if method != "shards":
        raise DomainError(f"unknown partition method {method!r}")
    labels = np.asarray(labels).reshape(-1)
    if n_clients < 1 or classes_per_client < 1:
        raise DomainError("n_clients and classes_per_client must be positive")
    n_shards = n_clients * classes_per_client
    if n_shards > labels.size:
        raise DomainError(f"{n_shards} shards requested for {labels.size} points")
    if labels.dtype.kind == "f":
        ranks = np.argsort(np.argsort(labels, kind="stable"), kind="stable")
        labels = (ranks * n_shards) // labels.size
    order = np.lexsort((np.arange(labels.size), labels))
    shards = np.array_split(order, n_shards)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_shards)
    shard_label = np.array([labels[s[0]] for s in shards])
    # deal shards round robin in a shuffled order, avoiding duplicate labels per client
    buckets = [[] for _ in range(n_clients)]
    pending = list(perm)
    for c in range(n_clients):
        for _ in range(classes_per_client):
            have = {shard_label[s] for s in buckets[c]}
            pick = next((s for s in pending if shard_label[s] not in have), pending[0])
            pending.remove(pick)
            buckets[c].append(pick)
    assignments = [np.sort(np.concatenate([shards[s] for s in b])) for b in buckets]
    return PartitionPlan(tuple(assignments), classes_per_client, seed)


# IDX binary format


@dataclass
class IDXArray:
    data: np.ndarray
    magic: int
    dims: tuple

    @property
    def kind(self) -> str:
        return "images" if self.magic == IDX_IMAGES_MAGIC else (
            "labels" if self.magic == IDX_LABELS_MAGIC else "other")


def parse_idx(buf, scale=True) -> IDXArray:
    """Parse an unsigned-byte IDX file.

    Images (3 dims) are returned as floats in ``[0, 1]`` when ``scale`` is
    set; labels (1 dim) as ``int64``. The payload length must match the
    header exactly.
    """
    buf = bytes(buf)
    if len(buf) < 4:
        raise IDXParseError(f"header needs 4 bytes, got {len(buf)}", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise IDXParseError("bad magic: first two bytes must be zero", 0)
    if buf[2] != IDX_UBYTE:
        raise IDXParseError(f"unsupported type code 0x{buf[2]:02x}", 2)
    ndim = buf[3]
    magic = struct.unpack(">I", buf[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise IDXParseError(f"bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x} "
                            f"or 0x{IDX_LABELS_MAGIC:08x}", 3)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IDXParseError(f"truncated header: expected {header} bytes, got {len(buf)}",
                            len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(buf) - header
    if actual != expected:
        what = "truncated payload" if actual < expected else "trailing bytes after payload"
        raise IDXParseError(f"{what}: expected {expected} payload bytes, got {actual}",
                            header + min(actual, expected))
    raw = np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_LABELS_MAGIC:
        data = raw.astype(np.int64)
    else:
        data = raw.astype(np.float64) / 255.0 if scale else raw.copy()
    return IDXArray(data, magic, tuple(dims))


def serialize_idx(arr) -> bytes:
    """Encode a uint8 array (1-d labels or 3-d images) as IDX bytes."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
            raise DomainError("IDX serialisation needs integers in [0, 255]")
        arr = arr.astype(np.uint8)
    if arr.ndim not in (1, 3):
        raise DimensionError("IDX serialisation supports 1-d labels or 3-d images")
    magic = IDX_LABELS_MAGIC if arr.ndim == 1 else IDX_IMAGES_MAGIC
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def load_idx_dataset(images_path, labels_path, limit=None, seed=0) -> LabeledDataset:
    """Flattened images in ``[0, 1]`` with integer labels, optionally subsampled."""
    images = parse_idx(Path(images_path).read_bytes())
    labels = parse_idx(Path(labels_path).read_bytes())
    if images.kind != "images" or labels.kind != "labels":
        raise DomainError("expected an images file and a labels file")
    x = images.data.reshape(images.dims[0], -1)
    y = labels.data
    if x.shape[0] != y.shape[0]:
        raise DimensionError("image and label counts differ")
    if limit is not None and limit < x.shape[0]:
        idx = np.sort(np.random.default_rng(seed).choice(x.shape[0], limit, replace=False))
        x, y = x[idx], y[idx]
    return LabeledDataset(x, y)


def embed_vectors(x, out_dim, seed=0, identity=False) -> np.ndarray:
    """Fixed Gaussian random projection ``x @ G / sqrt(out_dim)``.

    ``identity=True`` with ``out_dim == D`` returns the input unchanged.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    D = x.shape[1]
    if not 1 <= out_dim <= D:
        raise DomainError(f"out_dim={out_dim} must lie in [1, {D}]")
    if identity:
        if out_dim != D:
            raise DomainError("identity projection needs out_dim == D")
        return x.copy()
    G = np.random.default_rng(seed).standard_normal((D, out_dim))
    return x @ G / np.sqrt(out_dim)


def export_csv(data: LabeledDataset, path):
    """Write ``x_0..x_{s0-1}, y_0..`` columns (labels as a single ``y_0``)."""
    y = data.y[:, None] if data.is_classification else data.y
    header = [f"x_{i}" for i in range(data.x.shape[1])] + [f"y_{i}" for i in range(y.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for xi, yi in zip(data.x, y):
            w.writerow([repr(float(v)) for v in xi] + [
                str(int(v)) if data.is_classification else repr(float(v)) for v in yi])


def read_csv_dataset(path) -> LabeledDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xi = [i for i, h in enumerate(header) if h.startswith("x_")]
    yi = [i for i, h in enumerate(header) if h.startswith("y_")]
    arr = np.array(body, dtype=float)
    return LabeledDataset(arr[:, xi], arr[:, yi])
