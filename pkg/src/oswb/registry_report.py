"""Versioned benchmark manifests, metric definitions, and report emission.

Manifests are schema-versioned JSON; digests are SHA-256 over canonical
serializations so provenance stays tamper-evident across reprocessings.
Fractional splits are materialized from a per-id hash so they are pure
functions of (ids, fraction, seed) and independent of input order.

Two split assignment modes exist because exact fractions and append
stability cannot both hold at once:

* ``hash_threshold`` (default): an id is a test id iff its hash fraction is
  below the test fraction. Appending ids never changes old assignments; the
  realized fraction is binomial around the target.
* ``hash_rank``: ids sorted by hash, the lowest floor(f*n) become the test
  set. The count is exact; assignments near the cutoff may shift when ids
  are appended later.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyInput,
    InvariantViolation,
    LengthMismatch,
    ParseError,
)
from ._util import canonical_json, sha256_hex

SCHEMA_VERSION = 1
FIXED_TIMESTAMP = "1970-01-01T00:00:00Z"

TASKS = ("classification", "regression", "circular_regression", "detection")
METRICS = (
    "accuracy_pct",
    "rmse",
    "bias",
    "mae",
    "circular_mae_deg",
    "circular_rmse_deg",
    "f1_at_iou",
)

# Column direction when ranking models in tables. bias ranks by magnitude.
_MAXIMIZE = {"accuracy_pct", "f1_at_iou", "f1_micro", "f1_macro", "precision", "recall"}


def _check_pair(preds, truth):
    p = np.asarray(preds, dtype=object)
    t = np.asarray(truth, dtype=object)
    if p.shape[0] != t.shape[0]:
        raise LengthMismatch(f"{p.shape[0]} predictions vs {t.shape[0]} truths")
    if p.shape[0] == 0:
        raise EmptyInput("no items to score")


def accuracy_pct(preds, truth) -> float:
    """Percent of exact matches."""
    _check_pair(preds, truth)
    correct = sum(1 for a, b in zip(preds, truth) if a == b)
    return 100.0 * correct / len(preds)


def _as_float_pair(preds, truth):
    _check_pair(preds, truth)
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise ParseError("non-finite values in metric inputs")
    return p, t


def rmse(preds, truth) -> float:
    p, t = _as_float_pair(preds, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def bias(preds, truth) -> float:
    """Mean signed error (prediction minus truth)."""
    p, t = _as_float_pair(preds, truth)
    return float(np.mean(p - t))


def mae(preds, truth) -> float:
    p, t = _as_float_pair(preds, truth)
    return float(np.mean(np.abs(p - t)))


def circular_error_deg(pred_deg: float, truth_deg: float) -> float:
    """Angular error in degrees, full-circle wrap, in [0, 180]."""
    delta = (float(pred_deg) - float(truth_deg) + 180.0) % 360.0 - 180.0
    if delta == -180.0:
        delta = 180.0
    return abs(delta)


def circular_errors_deg(preds, truth) -> np.ndarray:
    _check_pair(preds, truth)
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    delta = np.mod(p - t + 180.0, 360.0) - 180.0
    return np.abs(np.where(delta == -180.0, 180.0, delta))


def circular_mae_deg(preds, truth) -> float:
    return float(np.mean(circular_errors_deg(preds, truth)))


def circular_rmse_deg(preds, truth) -> float:
    return float(np.sqrt(np.mean(circular_errors_deg(preds, truth) ** 2)))


# --- split materialization -----------------------------------------------------

def _hash_fraction(seed: int, image_id: str) -> float:
    digest = hashlib.sha256(f"{seed}:{image_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def materialize_split(
    ids,
    test_fraction: float,
    seed: int,
    assignment: str = "hash_threshold",
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Split ids into (train, test); pure in (ids, fraction, seed, assignment)."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise InvariantViolation("split ids must be unique")
    if not 0.0 < test_fraction < 1.0:
        raise InvariantViolation(f"test fraction {test_fraction} not in (0, 1)")
    if assignment == "hash_threshold":
        test = {i for i in ids if _hash_fraction(seed, i) < test_fraction}
    elif assignment == "hash_rank":
        ranked = sorted(ids, key=lambda i: (_hash_fraction(seed, i), i))
        test = set(ranked[: math.floor(test_fraction * len(ids))])
    else:
        raise ParseError(f"unknown split assignment {assignment!r}")
    train = tuple(i for i in ids if i not in test)
    test_ordered = tuple(i for i in ids if i in test)
    return train, test_ordered


# --- manifests -------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Either explicit id lists or a seeded fractional split."""

    mode: str  # "explicit" | "fraction"
    train_ids: tuple[str, ...] = ()
    test_ids: tuple[str, ...] = ()
    test_fraction: float = 0.0
    seed: int = 0
    assignment: str = "hash_threshold"

    def to_obj(self) -> dict:
        if self.mode == "explicit":
            return {
                "mode": "explicit",
                "train_ids": list(self.train_ids),
                "test_ids": list(self.test_ids),
            }
        return {
            "mode": "fraction",
            "test_fraction": self.test_fraction,
            "seed": self.seed,
            "assignment": self.assignment,
        }


@dataclass(frozen=True)
class BenchmarkManifest:
    name: str
    version: int
    task: str
    metric: str
    split: SplitSpec
    coloc: dict | None = None
    provenance: dict = field(default_factory=dict)

    def to_obj(self) -> dict:
        obj = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "version": self.version,
            "task": self.task,
            "metric": self.metric,
            "split": self.split.to_obj(),
            "provenance": self.provenance,
        }
        if self.coloc is not None:
            obj["coloc"] = self.coloc
        return obj

    def to_text(self) -> str:
        return json.dumps(self.to_obj(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return sha256_hex(canonical_json(self.to_obj()).encode("utf-8"))

    def materialize(self, ids) -> tuple[tuple[str, ...], tuple[str, ...]]:
        """(train_ids, test_ids) for the given dataset id list."""
        if self.split.mode == "explicit":
            idset = set(ids)
            train = tuple(i for i in self.split.train_ids if i in idset)
            test = tuple(i for i in self.split.test_ids if i in idset)
            return train, test
        return materialize_split(
            ids, self.split.test_fraction, self.split.seed, self.split.assignment
        )


def load_manifest(text: str) -> BenchmarkManifest:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError("manifest must be a JSON object")
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise ParseError(f"unsupported manifest schema {obj.get('schema_version')!r}")
    try:
        split_obj = obj["split"]
        if split_obj["mode"] == "explicit":
            split = SplitSpec(
                mode="explicit",
                train_ids=tuple(split_obj["train_ids"]),
                test_ids=tuple(split_obj["test_ids"]),
            )
        elif split_obj["mode"] == "fraction":
            split = SplitSpec(
                mode="fraction",
                test_fraction=float(split_obj["test_fraction"]),
                seed=int(split_obj["seed"]),
                assignment=split_obj.get("assignment", "hash_threshold"),
            )
        else:
            raise ParseError(f"unknown split mode {split_obj['mode']!r}")
        manifest = BenchmarkManifest(
            name=obj["name"],
            version=int(obj["version"]),
            task=obj["task"],
            metric=obj["metric"],
            split=split,
            coloc=obj.get("coloc"),
            provenance=obj.get("provenance", {}),
        )
    except KeyError as exc:
        raise ParseError(f"manifest missing field {exc}") from None
    violations = validate_manifest(manifest)
    if violations:
        raise InvariantViolation(violations)
    return manifest


def validate_manifest(m: BenchmarkManifest) -> list[str]:
    """All invariant checks; empty list means ok."""
    violations = []
    if not m.name:
        violations.append("name is empty")
    if m.version < 1:
        violations.append(f"version {m.version} must be >= 1")
    if m.task not in TASKS:
        violations.append(f"task {m.task!r} not one of {TASKS}")
    if m.metric not in METRICS:
        violations.append(f"metric {m.metric!r} not one of {METRICS}")
    if m.split.mode == "explicit":
        train, test = set(m.split.train_ids), set(m.split.test_ids)
        if len(train) != len(m.split.train_ids):
            violations.append("duplicate train ids")
        if len(test) != len(m.split.test_ids):
            violations.append("duplicate test ids")
        overlap = train & test
        if overlap:
            violations.append(
                f"{len(overlap)} ids in both splits, e.g. {sorted(overlap)[:3]}"
            )
    elif m.split.mode == "fraction":
        if not 0.0 < m.split.test_fraction < 1.0:
            violations.append(
                f"test fraction {m.split.test_fraction} not in (0, 1)"
            )
        if m.split.assignment not in ("hash_threshold", "hash_rank"):
            violations.append(f"unknown split assignment {m.split.assignment!r}")
    else:
        violations.append(f"unknown split mode {m.split.mode!r}")
    return violations


class ManifestRegistry:
    """Keeps the living benchmark honest: versions per name strictly increase."""

    def __init__(self):
        self._latest: dict[str, BenchmarkManifest] = {}

    def add(self, m: BenchmarkManifest) -> None:
        violations = validate_manifest(m)
        prev = self._latest.get(m.name)
        if prev is not None and m.version <= prev.version:
            violations.append(
                f"version {m.version} does not increase over {prev.version}"
            )
        if violations:
            raise InvariantViolation(violations)
        self._latest[m.name] = m

    def latest(self, name: str) -> BenchmarkManifest:
        return self._latest[name]

    def names(self) -> list[str]:
        return sorted(self._latest)


# --- reports --------------------------------------------------------------------

def digest_of_params(params: dict) -> str:
    return sha256_hex(canonical_json(params).encode("utf-8"))


@dataclass(frozen=True)
class MetricReport:
    """One model's scores on one benchmark version, with full provenance."""

    benchmark: str
    benchmark_version: int
    model: str
    metrics: dict[str, float]
    params: dict = field(default_factory=dict)
    config_digest: str = ""
    dataset_digest: str = ""
    seed: int = 0
    timestamp: str = FIXED_TIMESTAMP
    display_precision: int = 4

    def __post_init__(self):
        if not self.config_digest or not self.dataset_digest:
            raise InvariantViolation("report digests must be present")
        for name, value in self.metrics.items():
            if not math.isfinite(float(value)):
                raise InvariantViolation(f"metric {name} is not finite")

    def to_obj(self) -> dict:
        return {
            "benchmark": self.benchmark,
            "benchmark_version": self.benchmark_version,
            "model": self.model,
            "metrics": dict(self.metrics),
            "params": dict(self.params),
            "config_digest": self.config_digest,
            "dataset_digest": self.dataset_digest,
            "seed": self.seed,
            "timestamp": self.timestamp,
            "display_precision": self.display_precision,
        }


def report_from_obj(obj: dict) -> MetricReport:
    try:
        return MetricReport(
            benchmark=obj["benchmark"],
            benchmark_version=int(obj["benchmark_version"]),
            model=obj["model"],
            metrics={k: float(v) for k, v in obj["metrics"].items()},
            params=obj.get("params", {}),
            config_digest=obj["config_digest"],
            dataset_digest=obj["dataset_digest"],
            seed=int(obj.get("seed", 0)),
            timestamp=obj.get("timestamp", FIXED_TIMESTAMP),
            display_precision=int(obj.get("display_precision", 4)),
        )
    except KeyError as exc:
        raise ParseError(f"report missing field {exc}") from None


def emit_report(results: list[MetricReport], fmt: str = "machine-readable",
                sort_by: str | None = None) -> str:
    """Serialize reports as stable JSON lines or an aligned comparison table."""
    ordered = sorted(
        results, key=lambda r: (r.benchmark, r.benchmark_version, r.model)
    )
    if fmt == "machine-readable":
        return "".join(canonical_json(r.to_obj()) + "\n" for r in ordered)
    if fmt == "table":
        return _render_table(ordered, sort_by)
    raise ParseError(f"unknown report format {fmt!r}")


def parse_report(text: str) -> list[MetricReport]:
    reports = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"report line {lineno}: {exc}") from None
        reports.append(report_from_obj(obj))
    return reports


def _rank_key(metric: str, value: float) -> float:
    if metric in _MAXIMIZE:
        return -value
    if metric == "bias":
        return abs(value)
    return value


def _render_table(results: list[MetricReport], sort_by: str | None) -> str:
    """Model-by-metric table; best value per column is marked **v**, second _v_."""
    if not results:
        return "(no results)\n"
    columns: list[str] = []
    for r in results:
        for name in r.metrics:
            if name not in columns:
                columns.append(name)
    by_model: dict[str, dict[str, float]] = {}
    precision: dict[str, int] = {}
    for r in results:
        row = by_model.setdefault(r.model, {})
        row.update(r.metrics)
        precision[r.model] = r.display_precision

    sort_col = sort_by if sort_by in columns else columns[0]
    models = sorted(
        by_model,
        key=lambda m: (
            _rank_key(sort_col, by_model[m][sort_col])
            if sort_col in by_model[m]
            else math.inf,
            m,
        ),
    )

    marks: dict[tuple[str, str], str] = {}
    for col in columns:
        scored = [
            (m, _rank_key(col, by_model[m][col])) for m in models if col in by_model[m]
        ]
        scored.sort(key=lambda pair: (pair[1], pair[0]))
        if scored:
            marks[(scored[0][0], col)] = "best"
        if len(scored) > 1 and scored[1][1] != scored[0][1]:
            marks[(scored[1][0], col)] = "second"
        elif len(scored) > 1:
            marks[(scored[1][0], col)] = "best"

    header = ["model"] + columns
    rows = [header]
    for m in models:
        row = [m]
        for col in columns:
            if col not in by_model[m]:
                row.append("-")
                continue
            text = f"{by_model[m][col]:.{precision.get(m, 4)}f}"
            mark = marks.get((m, col))
            if mark == "best":
                text = f"**{text}**"
            elif mark == "second":
                text = f"_{text}_"
            row.append(text)
        rows.append(row)

    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * widths[j] for j in range(len(header))))
    return "\n".join(lines) + "\n"


def reports_to_csv(results: list[MetricReport]) -> str:
    """Flat CSV view (benchmark, version, model, metric, value)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["benchmark", "benchmark_version", "model", "metric", "value"])
    for r in sorted(results, key=lambda r: (r.benchmark, r.benchmark_version, r.model)):
        for name in sorted(r.metrics):
            writer.writerow(
                [r.benchmark, r.benchmark_version, r.model, name, repr(r.metrics[name])]
            )
    return out.getvalue()
