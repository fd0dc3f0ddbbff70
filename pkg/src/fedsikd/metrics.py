"""Round metrics, parameter-variance diagnostics and CSV/JSON serialization.

CSV schema (version 1), comma-delimited, ``\\n`` line endings::

    round,accuracy,loss,var_intra,var_total,wall_ms,per_cluster

``per_cluster`` holds a compact JSON list of objects with keys
``cluster_id``, ``member_count``, ``mean_student_train_loss`` and
``teacher_train_loss`` (``null`` when the strategy has no teacher).
Floats are written with ``repr`` so reading a file back is exact.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

SCHEMA_VERSION = 1
CSV_HEADER = ("round", "accuracy", "loss", "var_intra", "var_total", "wall_ms", "per_cluster")
EXTRACT_ROUNDS = 5


@dataclass
class ClusterMetrics:
    cluster_id: int
    member_count: int
    mean_student_train_loss: float
    teacher_train_loss: float | None = None


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    test_loss: float
    per_cluster: list[ClusterMetrics] = field(default_factory=list)
    var_intra: float = 0.0
    var_total: float = 0.0
    wall_time: float = 0.0  # seconds

    def __post_init__(self):
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"accuracy {self.test_accuracy} outside [0, 1]")
        if self.var_intra < 0 or self.var_total < 0:
            raise ValueError("variances must be non-negative")


def _flat64(p) -> np.ndarray:
    vec = p.flatten() if hasattr(p, "flatten") and not isinstance(p, np.ndarray) else np.ravel(p)
    return np.asarray(vec, dtype=np.float64)


def variance_diagnostics(client_params: Sequence[Any], assignment) -> tuple[float, float]:
    """Return ``(var_intra, var_total)`` of flattened client parameter vectors.

    ``var_total`` is the mean squared distance to the global mean;
    ``var_intra`` is the member-weighted average of each cluster's mean
    squared distance to its centroid. ``assignment`` is a label sequence or
    anything with a ``labels`` attribute. Sums run in client order inside
    each cluster, clusters in ascending id order.
    """
    labels = np.asarray(getattr(assignment, "labels", assignment))
    n = len(client_params)
    if n == 0:
        raise ValueError("no client parameters given")
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} parameter sets")
    vecs = [_flat64(p) for p in client_params]
    size = vecs[0].size
    if any(v.size != size for v in vecs):
        raise ValueError("all parameter sets must share one architecture")
    cluster_ids = np.unique(labels)

    def spread(idx):
        centre = np.zeros(size)
        for i in idx:
            centre += vecs[i]
        centre /= len(idx)
        total = 0.0
        for i in idx:
            diff = vecs[i] - centre
            total += float(diff @ diff)
        return total

    within = 0.0
    for c in cluster_ids:
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise ValueError(f"cluster {c} is empty")
        within += spread(idx)
    total = spread(np.arange(n))
    return within / n, total / n


# ---------------------------------------------------------------- CSV


def _fmt(x) -> str:
    return repr(float(x))


def _cluster_json(per_cluster: Sequence[ClusterMetrics]) -> str:
    items = []
    for c in per_cluster:
        d = asdict(c)
        for key in ("mean_student_train_loss", "teacher_train_loss"):
            v = d[key]
            d[key] = None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)
        items.append(d)
    return json.dumps(items, separators=(",", ":"), sort_keys=True)


def metrics_to_csv(rows: Sequence[RoundMetrics], include_wall_time: bool = True) -> str:
    if not rows:
        raise ValueError("no metric rows to write")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        wall = int(round(r.wall_time * 1000)) if include_wall_time else 0
        w.writerow(
            [
                r.round,
                _fmt(r.test_accuracy),
                _fmt(r.test_loss),
                _fmt(r.var_intra),
                _fmt(r.var_total),
                wall,
                _cluster_json(r.per_cluster),
            ]
        )
    return buf.getvalue()


def write_metrics(rows: Sequence[RoundMetrics], path, include_wall_time: bool = True) -> Path:
    """Write the per-round CSV. ``include_wall_time=False`` writes 0 in ``wall_ms``
    so that repeated runs produce identical bytes."""
    path = Path(path)
    text = metrics_to_csv(rows, include_wall_time)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    return path


def read_metrics(path) -> list[RoundMetrics]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        rows = []
        for rec in reader:
            clusters = [ClusterMetrics(**c) for c in json.loads(rec[6])]
            for c in clusters:
                if c.mean_student_train_loss is None:
                    c.mean_student_train_loss = float("nan")
            rows.append(
                RoundMetrics(
                    round=int(rec[0]),
                    test_accuracy=float(rec[1]),
                    test_loss=float(rec[2]),
                    var_intra=float(rec[3]),
                    var_total=float(rec[4]),
                    wall_time=int(rec[5]) / 1000.0,
                    per_cluster=clusters,
                )
            )
    return rows


# ---------------------------------------------------------------- JSON summary


@dataclass
class ExperimentSummary:
    config: dict
    table: list[dict]
    first_rounds: list[dict]
    final_round: dict
    extra: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_rows(cls, config: dict, rows: Sequence[RoundMetrics], extra: dict | None = None) -> "ExperimentSummary":
        if not rows:
            raise ValueError("no metric rows")
        table = [
            {
                "round": r.round,
                "accuracy": r.test_accuracy,
                "loss": r.test_loss,
                "var_intra": r.var_intra,
                "var_total": r.var_total,
            }
            for r in rows
        ]
        return cls(
            config=dict(config),
            table=table,
            first_rounds=[dict(t) for t in table[:EXTRACT_ROUNDS]],
            final_round=dict(table[-1]),
            extra=dict(extra or {}),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSummary":
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported summary schema {d.get('schema_version')}")
        return cls(**d)


def write_summary(summary: ExperimentSummary, path) -> Path:
    path = Path(path)
    path.write_text(summary.to_json(), encoding="utf-8")
    return path


def read_summary(path) -> ExperimentSummary:
    return ExperimentSummary.from_json(Path(path).read_text(encoding="utf-8"))
