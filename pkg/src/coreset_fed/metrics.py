"""Per-round metric rows and their CSV / JSON persistence."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import CoresetFedError

CSV_HEADER = ("round", "client_id", "split", "metric", "value", "wall_ms")
GLOBAL_CLIENT = -1


@dataclass(frozen=True)
class MetricRow:
    round: int
    client_id: int
    split: str
    metric: str
    value: float
    wall_ms: float = 0.0


def _fmt(x: float) -> str:
    # repr round-trips exactly; ints stay readable
    x = float(x)
    if math.isfinite(x) and x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


@dataclass
class MetricsTrace:
    """Append-only list of metric rows.

    Wall-clock time is only stored when ``record_time`` is set; otherwise the
    ``wall_ms`` column is 0 so that reruns produce byte-identical files.
    """

    rows: list = field(default_factory=list)
    record_time: bool = False
    _wall_ms: float = 0.0

    def set_wall_ms(self, wall_ms: float):
        self._wall_ms = float(wall_ms) if self.record_time else 0.0

    def add(self, round_, client_id, split, metric, value, wall_ms=None):
        if self.rows and round_ < self.rows[-1].round:
            raise CoresetFedError("metric rounds must be non-decreasing")
        wall = self._wall_ms if wall_ms is None else float(wall_ms)
        self.rows.append(MetricRow(int(round_), int(client_id), str(split), str(metric),
                                   float(value), wall))

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def extend(self, other: "MetricsTrace"):
        for r in other.rows:
            self.add(r.round, r.client_id, r.split, r.metric, r.value, r.wall_ms)

    def select(self, metric, client_id=None, split=None):
        """Rows for one metric, optionally filtered by client and split."""
        return [r for r in self.rows if r.metric == metric
                and (client_id is None or r.client_id == client_id)
                and (split is None or r.split == split)]

    def series(self, metric, client_id=GLOBAL_CLIENT, split=None):
        """``(rounds, values)`` lists for one metric of one client."""
        rows = self.select(metric, client_id, split)
        return [r.round for r in rows], [r.value for r in rows]

    def final(self, metric, client_id=GLOBAL_CLIENT):
        rows = self.select(metric, client_id)
        return rows[-1].value if rows else float("nan")

    def client_mean_series(self, metric):
        """Per-round mean of ``metric`` over all non-global clients."""
        by_round = {}
        for r in self.rows:
            if r.metric == metric and r.client_id != GLOBAL_CLIENT:
                by_round.setdefault(r.round, []).append(r.value)
        rounds = sorted(by_round)
        return rounds, [sum(by_round[t]) / len(by_round[t]) for t in rounds]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.round, r.client_id, r.split, r.metric,
                             _fmt(r.value), _fmt(r.wall_ms)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsTrace":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise CoresetFedError(f"unexpected metrics header {header!r}")
        trace = cls(record_time=True)
        for row in reader:
            trace.add(int(row[0]), int(row[1]), row[2], row[3], float(row[4]), float(row[5]))
        return trace


def package_version() -> str:
    """``git describe``-style version string, falling back to the package version."""
    from . import __version__
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=os.path.dirname(__file__), capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return _jsonable(obj.item())
    return obj


def emit_metrics(trace: MetricsTrace, out_dir, config: dict | None = None,
                 summary: dict | None = None):
    """Write ``metrics.csv`` and ``summary.json`` into ``out_dir``.

    Returns the two paths. IO failures are re-raised naming the path.
    """
    out = Path(out_dir)
    csv_path = out / "metrics.csv"
    json_path = out / "summary.json"
    final = {}
    for r in trace.rows:
        if r.client_id == GLOBAL_CLIENT:
            final[r.metric] = r.value
    payload = {
        "version": package_version(),
        "config": config or {},
        "final_metrics": final,
        "n_rows": len(trace),
    }
    if summary:
        payload.update(summary)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(trace.to_csv())
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise CoresetFedError(f"cannot write metrics to {out}: {exc}") from exc
    return csv_path, json_path
