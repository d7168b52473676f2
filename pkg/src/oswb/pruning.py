"""Diversity-based subset selection over embeddings (k-center greedy).

Farthest-point sampling is used as the concrete "most diverse subset"
criterion: it carries a 2-approximation guarantee on the covering radius and
is exactly testable. The original training-time pruning criterion it stands
in for is not published in detail, so this module is an interpretation and
is documented as such in reports.

Distances accumulate in float64 regardless of storage precision; max-min
selections are sensitive to rounding ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed_store import EmbeddingSet, l2_normalize_rows
from .errors import EmptySelection, ParseError, TargetTooLarge

_BLOCK = 1024


@dataclass(frozen=True)
class PruneConfig:
    target_size: int
    metric: str = "euclidean"  # euclidean | cosine_distance
    seed_strategy: str = "medoid"  # medoid | fixed_index
    seed_index: int = 0
    reselect_period: int = 1

    def __post_init__(self):
        if self.target_size < 1:
            raise ParseError("target_size must be >= 1")
        if self.metric not in ("euclidean", "cosine_distance"):
            raise ParseError(f"unknown metric {self.metric!r}")
        if self.seed_strategy not in ("medoid", "fixed_index"):
            raise ParseError(f"unknown seed strategy {self.seed_strategy!r}")
        if self.reselect_period < 1:
            raise ParseError("reselect_period must be >= 1")

    def params(self) -> dict:
        return {
            "target_size": self.target_size,
            "metric": self.metric,
            "seed_strategy": self.seed_strategy,
            "seed_index": self.seed_index,
            "reselect_period": self.reselect_period,
        }


@dataclass(frozen=True)
class PruneResult:
    """Selected indices in selection order, with the max-min distance at each
    step (inf for the seed) and the final covering radius."""

    selected: tuple[int, ...]
    selection_dists: tuple[float, ...]
    coverage_radius: float


def _feature_matrix(vectors: np.ndarray, metric: str) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    if metric == "cosine_distance":
        x = l2_normalize_rows(x)
    return x


def _dists_to_point(x: np.ndarray, center: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine_distance":
        return 1.0 - x @ center
    diff = x - center
    return np.sqrt(np.sum(diff * diff, axis=1))


def kcenter_greedy(es: EmbeddingSet | np.ndarray, cfg: PruneConfig) -> PruneResult:
    """Farthest-point sampling down to cfg.target_size points.

    Each step adds the point maximizing the distance to the current selection
    (ties to the lowest index), starting from the medoid or a fixed index.
    """
    vectors = es.vectors if isinstance(es, EmbeddingSet) else np.asarray(es)
    n = vectors.shape[0]
    m = cfg.target_size
    if m > n:
        raise TargetTooLarge(f"target {m} exceeds dataset size {n}")
    x = _feature_matrix(vectors, cfg.metric)

    if cfg.seed_strategy == "fixed_index":
        if not 0 <= cfg.seed_index < n:
            raise ParseError(f"seed index {cfg.seed_index} out of range")
        seed = cfg.seed_index
    else:
        seed = _medoid(x, cfg.metric)

    selected = [seed]
    dists = [float("inf")]
    min_dist = _dists_to_point(x, x[seed], cfg.metric)
    min_dist[seed] = 0.0
    for _ in range(m - 1):
        far = int(np.argmax(min_dist))  # argmax ties to the lowest index
        selected.append(far)
        dists.append(float(min_dist[far]))
        min_dist = np.minimum(min_dist, _dists_to_point(x, x[far], cfg.metric))
        min_dist[far] = 0.0
    return PruneResult(
        selected=tuple(selected),
        selection_dists=tuple(dists),
        coverage_radius=float(min_dist.max()),
    )


def _medoid(x: np.ndarray, metric: str) -> int:
    """Point minimizing the summed distance to all others (ties to lowest index)."""
    n = x.shape[0]
    sums = np.zeros(n)
    for start in range(0, n, _BLOCK):
        block = x[start : start + _BLOCK]
        if metric == "cosine_distance":
            d = 1.0 - block @ x.T
        else:
            d2 = (
                np.sum(block * block, axis=1)[:, None]
                - 2.0 * (block @ x.T)
                + np.sum(x * x, axis=1)[None, :]
            )
            d = np.sqrt(np.clip(d2, 0.0, None))
        sums[start : start + _BLOCK] = d.sum(axis=1)
    return int(np.argmin(sums))


def coverage_radius(
    selected, es: EmbeddingSet | np.ndarray, metric: str = "euclidean"
) -> float:
    """Max over all points of the distance to the nearest selected point."""
    selected = list(selected)
    if not selected:
        raise EmptySelection("no selected points")
    vectors = es.vectors if isinstance(es, EmbeddingSet) else np.asarray(es)
    x = _feature_matrix(vectors, metric)
    min_dist = np.full(x.shape[0], np.inf)
    for idx in selected:
        min_dist = np.minimum(min_dist, _dists_to_point(x, x[idx], metric))
    return float(min_dist.max())


def simulate_schedule(
    sets_by_epoch: list[EmbeddingSet] | list[np.ndarray], cfg: PruneConfig
) -> list[PruneResult]:
    """Re-select every cfg.reselect_period epochs on that epoch's embeddings;
    carry the previous subset forward in between (radius re-measured each epoch)."""
    results: list[PruneResult] = []
    current: PruneResult | None = None
    for epoch, es in enumerate(sets_by_epoch):
        if current is None or epoch % cfg.reselect_period == 0:
            current = kcenter_greedy(es, cfg)
            results.append(current)
        else:
            results.append(
                PruneResult(
                    selected=current.selected,
                    selection_dists=current.selection_dists,
                    coverage_radius=coverage_radius(current.selected, es, cfg.metric),
                )
            )
    return results


def prune_csv(result: PruneResult, image_ids) -> str:
    """CSV rows (rank, image_id, min_distance_at_selection), selection order."""
    lines = ["rank,image_id,min_distance_at_selection"]
    for rank, (idx, dist) in enumerate(zip(result.selected, result.selection_dists)):
        lines.append(f"{rank},{image_ids[idx]},{repr(dist)}")
    return "\n".join(lines) + "\n"


def radius_trace_csv(results: list[PruneResult]) -> str:
    lines = ["epoch,coverage_radius,reselected"]
    prev = None
    for epoch, r in enumerate(results):
        reselected = prev is None or r.selected is not prev.selected
        lines.append(f"{epoch},{repr(r.coverage_radius)},{int(reselected)}")
        prev = r
    return "\n".join(lines) + "\n"
