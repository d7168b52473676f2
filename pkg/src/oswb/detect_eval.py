"""Iceberg detection scoring: IoU, greedy score-descending matching, F1.

Matching discards predictions under the score threshold, then walks the
survivors in descending score; each may claim the unmatched ground-truth box
of highest IoU at or above the IoU threshold (equal-IoU ties go to the lowest
ground-truth index). Micro-aggregation over images is the default; a per-image
macro average is also emitted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import EmptyEvaluation, ParseError
from ._util import float_repr
from . import registry_report as rr


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with continuous pixel coordinates.

    Area uses the inclusive-exclusive convention (x_max - x_min) * (y_max - y_min).
    Predictions carry a score in [0, 1]; ground truth carries none.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float | None = None

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ParseError(
                f"box ({self.x_min},{self.y_min},{self.x_max},{self.y_max}) "
                "must have positive area"
            )
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ParseError(f"score {self.score} out of [0, 1]")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def iou(a: Box, b: Box) -> float:
    """Intersection over union in [0, 1]."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def match_detections(
    preds: list[Box],
    gts: list[Box],
    iou_thresh: float,
    score_thresh: float,
) -> tuple[int, int, int, list[tuple[int, int, float]]]:
    """Greedy matching; returns (TP, FP, FN, pairs of (pred_idx, gt_idx, iou))."""
    if not 0.0 <= iou_thresh <= 1.0 or not 0.0 <= score_thresh <= 1.0:
        raise ParseError("thresholds must lie in [0, 1]")
    for p in preds:
        if p.score is None:
            raise ParseError("prediction box without score")
    survivors = [i for i, p in enumerate(preds) if p.score >= score_thresh]
    survivors.sort(key=lambda i: (-preds[i].score, i))

    gt_taken = [False] * len(gts)
    pairs: list[tuple[int, int, float]] = []
    for pi in survivors:
        best_gt = -1
        best_iou = 0.0
        for gi, gt in enumerate(gts):
            if gt_taken[gi]:
                continue
            overlap = iou(preds[pi], gt)
            if overlap >= iou_thresh and overlap > best_iou:
                best_iou = overlap
                best_gt = gi
        if best_gt >= 0:
            gt_taken[best_gt] = True
            pairs.append((pi, best_gt, best_iou))
    tp = len(pairs)
    fp = len(survivors) - tp
    fn = len(gts) - tp
    return tp, fp, fn, pairs


def f1(tp: int, fp: int, fn: int) -> float:
    """F1 = 2TP / (2TP + FP + FN); an all-zero aggregate is not scoreable."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ParseError("counts must be non-negative")
    denom = 2 * tp + fp + fn
    if denom == 0:
        raise EmptyEvaluation("no ground truth and no predictions to score")
    return 2.0 * tp / denom


@dataclass(frozen=True)
class DetectionSet:
    """Per-image predictions and ground truth."""

    items: dict[str, tuple[tuple[Box, ...], tuple[Box, ...]]]

    def __post_init__(self):
        for image_id, (preds, gts) in self.items.items():
            for p in preds:
                if p.score is None:
                    raise ParseError(f"{image_id}: prediction without score")
            for g in gts:
                if g.score is not None:
                    raise ParseError(f"{image_id}: ground truth with score")

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class DetectionReport:
    """Micro counts and F1, per-image table, and a precision/recall sweep."""

    iou_thresh: float
    score_thresh: float
    tp: int
    fp: int
    fn: int
    f1_micro: float
    f1_macro: float
    per_image: dict[str, dict] = field(default_factory=dict)
    pr_curve: tuple[tuple[float, float, float], ...] = ()


def evaluate_detection_benchmark(
    dset: DetectionSet, iou_thresh: float, score_thresh: float
) -> DetectionReport:
    """Micro-aggregate TP/FP/FN across images (sorted image order), then F1."""
    total_tp = total_fp = total_fn = 0
    per_image: dict[str, dict] = {}
    per_image_f1: list[float] = []
    for image_id in sorted(dset.items):
        preds, gts = dset.items[image_id]
        tp, fp, fn, pairs = match_detections(
            list(preds), list(gts), iou_thresh, score_thresh
        )
        total_tp += tp
        total_fp += fp
        total_fn += fn
        entry = {"tp": tp, "fp": fp, "fn": fn}
        if 2 * tp + fp + fn > 0:
            entry["f1"] = f1(tp, fp, fn)
            per_image_f1.append(entry["f1"])
        per_image[image_id] = entry
    if 2 * total_tp + total_fp + total_fn == 0:
        raise EmptyEvaluation("no ground truth and no predictions in any image")

    scores = sorted(
        {p.score for preds, _ in dset.items.values() for p in preds}
    )
    curve = []
    for thresh in scores:
        tp = fp = fn = 0
        for preds, gts in dset.items.values():
            a, b, c, _ = match_detections(list(preds), list(gts), iou_thresh, thresh)
            tp, fp, fn = tp + a, fp + b, fn + c
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        curve.append((float(thresh), precision, recall))

    return DetectionReport(
        iou_thresh=iou_thresh,
        score_thresh=score_thresh,
        tp=total_tp,
        fp=total_fp,
        fn=total_fn,
        f1_micro=f1(total_tp, total_fp, total_fn),
        f1_macro=(sum(per_image_f1) / len(per_image_f1)) if per_image_f1 else 0.0,
        per_image=per_image,
        pr_curve=tuple(curve),
    )


def detection_metric_report(
    report: DetectionReport,
    benchmark: str,
    benchmark_version: int,
    model_tag: str,
    dataset_digest: str,
    seed: int = 0,
    timestamp: str = rr.FIXED_TIMESTAMP,
) -> "rr.MetricReport":
    params = {
        "iou_thresh": report.iou_thresh,
        "score_thresh": report.score_thresh,
        "tp": report.tp,
        "fp": report.fp,
        "fn": report.fn,
    }
    return rr.MetricReport(
        benchmark=benchmark,
        benchmark_version=benchmark_version,
        model=model_tag,
        metrics={
            "f1_at_iou": report.f1_micro,
            "f1_macro": report.f1_macro,
        },
        params=params,
        config_digest=rr.digest_of_params(
            {"iou_thresh": report.iou_thresh, "score_thresh": report.score_thresh}
        ),
        dataset_digest=dataset_digest,
        seed=seed,
        timestamp=timestamp,
    )


# --- CSV interfaces -----------------------------------------------------------

def parse_boxes_csv(text: str) -> dict[str, list[Box]]:
    """Boxes CSV: image_id,x_min,y_min,x_max,y_max[,score]."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("boxes CSV is empty") from None
    expected = ["image_id", "x_min", "y_min", "x_max", "y_max"]
    if header[:5] != expected:
        raise ParseError(f"boxes CSV header {header!r}, expected {expected}[,score]")
    has_score = len(header) > 5 and header[5] == "score"
    boxes: dict[str, list[Box]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            box = Box(
                x_min=float(row[1]),
                y_min=float(row[2]),
                x_max=float(row[3]),
                y_max=float(row[4]),
                score=float(row[5]) if has_score and len(row) > 5 and row[5] else None,
            )
        except (ValueError, IndexError) as exc:
            raise ParseError(f"boxes CSV line {lineno}: {exc}") from None
        boxes.setdefault(row[0], []).append(box)
    return boxes


def write_boxes_csv(boxes: dict[str, list[Box]], with_scores: bool) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    header = ["image_id", "x_min", "y_min", "x_max", "y_max"]
    if with_scores:
        header.append("score")
    writer.writerow(header)
    for image_id in sorted(boxes):
        for b in boxes[image_id]:
            row = [image_id, float_repr(b.x_min), float_repr(b.y_min),
                   float_repr(b.x_max), float_repr(b.y_max)]
            if with_scores:
                row.append(float_repr(b.score))
            writer.writerow(row)
    return out.getvalue()


def detection_set_from_csv(preds_text: str, gts_text: str) -> DetectionSet:
    preds = parse_boxes_csv(preds_text)
    gts = parse_boxes_csv(gts_text)
    items = {}
    for image_id in sorted(set(preds) | set(gts)):
        items[image_id] = (
            tuple(preds.get(image_id, ())),
            tuple(gts.get(image_id, ())),
        )
    return DetectionSet(items=items)
