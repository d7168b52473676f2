"""Zero-shot probes over frozen embeddings: exact kNN and closed-form ridge.

kNN is exact brute force (blocked matmuls, no approximate index), so oracle
tests can demand equality with an exhaustive scan. Neighbor order is the
lexicographic key (distance, image_id): content-based, hence invariant to
any permutation of the training set.

Whether embeddings should be L2-normalized before probing, and which k,
metric, and weighting to use, are configuration — every report records them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .embed_store import LabeledSet, l2_normalize_rows
from .errors import (
    DegeneratePrediction,
    DimMismatch,
    EmptyTrainSet,
    ParseError,
    SingularSystem,
    SplitOverlap,
)
from . import registry_report as rr

PROBE_KINDS = ("knn_classify", "knn_regress", "ridge", "ridge_circular")


@dataclass(frozen=True)
class ProbeConfig:
    """Probe hyperparameters; defaults are the conventional SSL-probing choices
    (k=20, cosine, softmax with temperature 0.07) and are always recorded."""

    kind: str = "knn_classify"
    k: int = 20
    metric: str = "cosine"
    weighting: str = "softmax"
    temperature: float = 0.07
    ridge_lambda: float = 1e-3
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise ParseError(f"unknown probe kind {self.kind!r}")
        if self.k < 1:
            raise ParseError("k must be >= 1")
        if self.metric not in ("cosine", "euclidean"):
            raise ParseError(f"unknown metric {self.metric!r}")
        if self.weighting not in ("uniform", "softmax"):
            raise ParseError(f"unknown weighting {self.weighting!r}")
        if not self.temperature > 0:
            raise ParseError("temperature must be > 0")
        if self.ridge_lambda < 0:
            raise ParseError("ridge_lambda must be >= 0")

    def params(self) -> dict:
        return {
            "kind": self.kind,
            "k": self.k,
            "metric": self.metric,
            "weighting": self.weighting,
            "temperature": self.temperature,
            "lambda": self.ridge_lambda,
            "normalize": self.normalize,
        }


# --- exact kNN ---------------------------------------------------------------

class _KnnIndex:
    """Training vectors pre-sorted by image_id so a stable distance sort yields
    the (distance, image_id) lexicographic neighbor order."""

    def __init__(self, train: LabeledSet, cfg: ProbeConfig):
        if len(train) == 0:
            raise EmptyTrainSet("training set is empty")
        order = sorted(range(len(train)), key=lambda i: train.image_ids[i])
        self.ids = [train.image_ids[i] for i in order]
        x = np.asarray(train.vectors, dtype=np.float64)[order]
        if cfg.normalize or cfg.metric == "cosine":
            x = l2_normalize_rows(x)
        self.x = x
        self.sq_norms = np.sum(x * x, axis=1)
        self.y = np.asarray(train.y)[order]
        self.cfg = cfg
        self.k = min(cfg.k, len(self.ids))

    def search(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Top-k neighbor (indices, similarities) per query row.

        Similarity is cosine similarity for the cosine metric and negated
        Euclidean distance otherwise; larger is always closer.
        """
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q[None, :]
        if q.shape[1] != self.x.shape[1]:
            raise DimMismatch(
                f"query dim {q.shape[1]} != train dim {self.x.shape[1]}"
            )
        if self.cfg.normalize or self.cfg.metric == "cosine":
            q = l2_normalize_rows(q)
        if self.cfg.metric == "cosine":
            sims = q @ self.x.T
        else:
            d2 = self.sq_norms[None, :] - 2.0 * (q @ self.x.T)
            d2 += np.sum(q * q, axis=1)[:, None]
            sims = -np.sqrt(np.clip(d2, 0.0, None))
        order = np.argsort(-sims, axis=1, kind="stable")[:, : self.k]
        picked = np.take_along_axis(sims, order, axis=1)
        return order, picked

    def vote_weights(self, sims: np.ndarray) -> np.ndarray:
        if self.cfg.weighting == "uniform":
            return np.ones_like(sims)
        # Shift by the row max before exponentiating; argmax/weighted means
        # are invariant to the common factor and underflow is avoided.
        shifted = (sims - sims.max(axis=1, keepdims=True)) / self.cfg.temperature
        return np.exp(shifted)


def knn_classify(query: np.ndarray, train: LabeledSet, cfg: ProbeConfig):
    """Predict a class for one query; returns (label, per-class vote weights)."""
    if train.kind != "class":
        raise ParseError("knn_classify needs a class-labeled training set")
    index = _KnnIndex(train, cfg)
    labels, votes = _classify_batch(index, np.asarray(query, dtype=np.float64)[None, :],
                                    train.classes)
    return labels[0], {c: float(votes[0, j]) for j, c in enumerate(train.classes)}


def _classify_batch(index: _KnnIndex, queries: np.ndarray, classes):
    nbr, sims = index.search(queries)
    w = index.vote_weights(sims)
    nbr_classes = index.y[nbr]
    votes = np.zeros((queries.shape[0], len(classes)))
    rows = np.repeat(np.arange(queries.shape[0]), nbr.shape[1])
    np.add.at(votes, (rows, nbr_classes.ravel()), w.ravel())
    # argmax takes the first maximum: ties fall to the declaration order.
    pred_idx = np.argmax(votes, axis=1)
    return [classes[i] for i in pred_idx], votes


def knn_regress(query: np.ndarray, train: LabeledSet, cfg: ProbeConfig) -> float:
    """Weighted mean of the k nearest neighbors' scalar targets."""
    if train.kind != "scalar":
        raise ParseError("knn_regress needs a scalar-labeled training set")
    index = _KnnIndex(train, cfg)
    preds = _regress_batch(index, np.asarray(query, dtype=np.float64)[None, :])
    return float(preds[0])


def _regress_batch(index: _KnnIndex, queries: np.ndarray) -> np.ndarray:
    nbr, sims = index.search(queries)
    w = index.vote_weights(sims)
    targets = index.y[nbr]
    return np.sum(w * targets, axis=1) / np.sum(w, axis=1)


# --- ridge -------------------------------------------------------------------

@dataclass(frozen=True)
class RidgeModel:
    weights: np.ndarray
    bias: float
    cond: float


def ridge_fit(x: np.ndarray, y: np.ndarray, lam: float) -> RidgeModel:
    """Closed-form ridge on mean-centered data; the bias is unregularized.

    Solved through the eigendecomposition of the centered Gram matrix, which
    also yields the condition number (warned about above 1e10).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimMismatch(f"design matrix shape {x.shape} unusable")
    if x.shape[0] != y.shape[0]:
        raise DimMismatch(f"{x.shape[0]} rows vs {y.shape[0]} targets")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ParseError("non-finite entries in ridge inputs")
    if lam < 0:
        raise ParseError("lambda must be >= 0")

    x_mean = x.mean(axis=0)
    y_mean = float(y.mean())
    xc = x - x_mean
    gram = xc.T @ xc + lam * np.eye(x.shape[1])
    eigvals, eigvecs = np.linalg.eigh(gram)
    e_max = float(eigvals[-1])
    e_min = float(eigvals[0])
    if lam == 0.0 and e_min <= max(e_max, 0.0) * 1e-12:
        raise SingularSystem(
            f"Gram matrix rank-deficient (eigenvalue ratio {e_min:.3g}/{e_max:.3g})"
        )
    cond = e_max / e_min if e_min > 0 else math.inf
    if cond > 1e10:
        warnings.warn(
            f"ridge system condition number {cond:.3g} exceeds 1e10",
            RuntimeWarning,
            stacklevel=2,
        )
    rhs = xc.T @ (y - y_mean)
    w = eigvecs @ ((eigvecs.T @ rhs) / eigvals)
    bias = y_mean - float(x_mean @ w)
    return RidgeModel(weights=w, bias=bias, cond=cond)


def ridge_predict(model: RidgeModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.weights.shape[0]:
        raise DimMismatch(
            f"input dim {x.shape[1]} != model dim {model.weights.shape[0]}"
        )
    out = x @ model.weights + model.bias
    return out[0] if single else out


@dataclass(frozen=True)
class CircularModel:
    """Two ridge models on sin/cos of the target angle."""

    sin_model: RidgeModel
    cos_model: RidgeModel


def circular_fit(x: np.ndarray, theta_deg: np.ndarray, lam: float) -> CircularModel:
    theta = np.asarray(theta_deg, dtype=np.float64)
    if np.any(theta < 0.0) or np.any(theta >= 360.0):
        raise ParseError("angles must lie in [0, 360)")
    rad = np.radians(theta)
    return CircularModel(
        sin_model=ridge_fit(x, np.sin(rad), lam),
        cos_model=ridge_fit(x, np.cos(rad), lam),
    )


def circular_predict(model: CircularModel, x: np.ndarray) -> np.ndarray:
    s = np.atleast_1d(ridge_predict(model.sin_model, x))
    c = np.atleast_1d(ridge_predict(model.cos_model, x))
    r2 = s * s + c * c
    if np.any(r2 < 1e-12):
        bad = int(np.argmin(r2))
        raise DegeneratePrediction(
            f"sin/cos resultant {float(r2[bad]):.3g} below 1e-12 at row {bad}"
        )
    return np.degrees(np.arctan2(s, c)) % 360.0


# --- benchmark runner -----------------------------------------------------------

KIND_NEEDS = {
    "knn_classify": "class",
    "knn_regress": "scalar",
    "ridge": "scalar",
    "ridge_circular": "angle",
}

_BATCH = 256


@dataclass(frozen=True)
class ProbeResult:
    """Per-query predictions plus the aggregate report.

    For kNN probes, neighbor ids and similarities are kept per query; for
    ridge probes the fitted model is kept instead.
    """

    predictions: list
    report: "rr.MetricReport"
    neighbor_ids: list | None = None
    neighbor_sims: np.ndarray | None = None
    model: RidgeModel | CircularModel | None = None


def run_probe_benchmark(
    train: LabeledSet,
    test: LabeledSet,
    cfg: ProbeConfig,
    benchmark: str = "adhoc",
    benchmark_version: int = 1,
    model_tag: str = "unknown",
    seed: int = 0,
    timestamp: str = rr.FIXED_TIMESTAMP,
) -> ProbeResult:
    """Evaluate every test item against the training set and aggregate metrics."""
    overlap = set(train.image_ids) & set(test.image_ids)
    if overlap:
        raise SplitOverlap(
            f"{len(overlap)} ids in both splits, e.g. {sorted(overlap)[:3]}"
        )
    if train.dim != test.dim:
        raise DimMismatch(f"train dim {train.dim} != test dim {test.dim}")
    need = KIND_NEEDS[cfg.kind]
    if train.kind != need or test.kind != need:
        raise ParseError(
            f"{cfg.kind} needs {need!r} labels, got {train.kind!r}/{test.kind!r}"
        )

    queries = np.asarray(test.vectors, dtype=np.float64)
    neighbor_ids = None
    neighbor_sims = None
    fitted = None

    if cfg.kind in ("knn_classify", "knn_regress"):
        index = _KnnIndex(train, cfg)
        preds: list = []
        nbr_ids: list = []
        sims_rows: list = []
        for start in range(0, len(test), _BATCH):
            block = queries[start : start + _BATCH]
            if cfg.kind == "knn_classify":
                labels, _ = _classify_batch(index, block, train.classes)
                preds.extend(labels)
            else:
                preds.extend(float(v) for v in _regress_batch(index, block))
            nbr, sims = index.search(block)
            nbr_ids.extend([index.ids[j] for j in row] for row in nbr)
            sims_rows.append(sims)
        neighbor_ids = nbr_ids
        neighbor_sims = np.vstack(sims_rows) if sims_rows else np.zeros((0, 0))
    elif cfg.kind == "ridge":
        fitted = ridge_fit(train.vectors, train.y, cfg.ridge_lambda)
        preds = [float(v) for v in ridge_predict(fitted, queries)]
    else:
        fitted = circular_fit(train.vectors, train.y, cfg.ridge_lambda)
        preds = [float(v) for v in circular_predict(fitted, queries)]

    if test.kind == "class":
        truth = [test.classes[i] for i in test.y]
        metrics = {"accuracy_pct": rr.accuracy_pct(preds, truth)}
    elif test.kind == "scalar":
        truth = test.y
        metrics = {
            "rmse": rr.rmse(preds, truth),
            "bias": rr.bias(preds, truth),
            "mae": rr.mae(preds, truth),
        }
    else:
        truth = test.y
        metrics = {
            "circular_mae_deg": rr.circular_mae_deg(preds, truth),
            "circular_rmse_deg": rr.circular_rmse_deg(preds, truth),
        }

    params = cfg.params()
    params.update(
        {
            "n_train": len(train),
            "n_test": len(test),
            "dim": train.dim,
            "train_digest": train.digest(),
            "test_digest": test.digest(),
        }
    )
    if test.unit:
        params["unit"] = test.unit
    report = rr.MetricReport(
        benchmark=benchmark,
        benchmark_version=benchmark_version,
        model=model_tag,
        metrics=metrics,
        params=params,
        config_digest=rr.digest_of_params(cfg.params()),
        dataset_digest=test.digest(),
        seed=seed,
        timestamp=timestamp,
    )
    return ProbeResult(
        predictions=preds,
        report=report,
        neighbor_ids=neighbor_ids,
        neighbor_sims=neighbor_sims,
        model=fitted,
    )


def with_defaults_for(kind: str, cfg: ProbeConfig | None = None) -> ProbeConfig:
    """A ProbeConfig of the given kind, preserving any explicit settings."""
    if cfg is None:
        return ProbeConfig(kind=kind)
    return replace(cfg, kind=kind)
