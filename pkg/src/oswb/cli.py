"""Command-line entry point: ingest, colocate, eval, prune, simmap, report.

Every command is deterministic given (inputs, config, seed): the default seed
is a fixed constant, report timestamps default to a fixed epoch, and output
files are written atomically (temp + rename). The effective resolved
configuration is always written next to the outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import coloc, detect_eval, embed_store, pruning, probes, simmap
from . import registry_report as rr
from .errors import ParseError, WorkbenchError
from ._util import atomic_write_bytes, atomic_write_text, canonical_json, digest_of

DEFAULT_SEED = 42
OUT_DIR_ENV = "OSWB_OUT_DIR"

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _read_bytes(path: str) -> bytes:
    return Path(path).read_bytes()


def _read_text(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        obj = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise ParseError(f"config file {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError(f"config file {path} must hold a JSON object")
    return obj


def _write_resolved_config(out_dir: Path, command: str, resolved: dict) -> None:
    atomic_write_text(
        out_dir / f"{command}.config.json",
        json.dumps(resolved, indent=2, sort_keys=True) + "\n",
    )


def _probe_config(args, config: dict, kind: str) -> probes.ProbeConfig:
    section = dict(config.get("probe", {}))
    if getattr(args, "k", None) is not None:
        section["k"] = args.k
    if getattr(args, "metric", None):
        section["metric"] = args.metric
    if getattr(args, "weighting", None):
        section["weighting"] = args.weighting
    if getattr(args, "temperature", None) is not None:
        section["temperature"] = args.temperature
    if getattr(args, "ridge_lambda", None) is not None:
        section["lambda"] = args.ridge_lambda
    if getattr(args, "normalize", False):
        section["normalize"] = True
    if "lambda" in section:
        section["ridge_lambda"] = section.pop("lambda")
    return probes.ProbeConfig(kind=kind, **section)


def _coloc_criteria(args, config: dict) -> coloc.ColocCriteria:
    base = (
        coloc.ColocCriteria.swh_default()
        if args.task == "swh"
        else coloc.ColocCriteria.wind_default()
    )
    section = dict(config.get("coloc", {}))
    max_dt = args.max_dt_s if args.max_dt_s is not None else section.get("max_dt_s")
    gate = base.gate
    if args.box_deg is not None:
        gate = coloc.LatLonBox(args.box_deg)
    elif args.radius_km is not None:
        gate = coloc.GreatCircle(args.radius_km)
    elif args.footprint:
        gate = coloc.Footprint()
    require = base.require_flags_clear
    if args.require_clear is not None:
        require = frozenset(f for f in args.require_clear.split(";") if f)
    tie = args.tie_break or section.get("tie_break") or base.tie_break
    return coloc.ColocCriteria(
        max_dt_s=int(max_dt) if max_dt is not None else base.max_dt_s,
        gate=gate,
        require_flags_clear=require,
        tie_break=tie,
    )


# --- subcommands -----------------------------------------------------------------

def cmd_ingest(args, config: dict, out_dir: Path) -> int:
    es = embed_store.parse_embedding_file(_read_bytes(args.embeddings))
    classes = (
        tuple(args.classes.split(";")) if args.classes else embed_store.TENGEOP_CLASSES
    )
    table = embed_store.parse_label_csv(
        _read_text(args.labels), kind=args.label_kind, classes=classes
    )
    labeled = embed_store.join_labels(es, table)
    meta = None
    if args.meta:
        meta = embed_store.parse_meta_jsonl(_read_text(args.meta))
    summary = {
        "embeddings_digest": es.digest(),
        "labels_digest": table.digest(),
        "dataset_digest": labeled.digest(),
        "n_images": len(es),
        "dim": es.dim,
        "patch_shape": list(es.patch_shape),
        "n_labeled": len(labeled),
        "n_unmatched_embeddings": labeled.n_unmatched_embeddings,
        "n_unmatched_labels": labeled.n_unmatched_labels,
        "n_meta": len(meta) if meta is not None else None,
        "seed": args.seed,
    }
    atomic_write_text(
        out_dir / "ingest.summary.json",
        json.dumps(summary, indent=2, sort_keys=True) + "\n",
    )
    print(f"dataset digest {labeled.digest()}")
    print(
        f"{len(labeled)} labeled of {len(es)} images "
        f"({labeled.n_unmatched_embeddings} embeddings / "
        f"{labeled.n_unmatched_labels} labels unmatched)"
    )
    return EXIT_OK


def cmd_colocate(args, config: dict, out_dir: Path) -> int:
    images = embed_store.parse_meta_jsonl(_read_text(args.meta))
    refs = coloc.parse_refs_csv(_read_text(args.refs))
    criteria = _coloc_criteria(args, config)
    kind = coloc.KIND_SWH if args.task == "swh" else coloc.KIND_WIND
    table = coloc.build_matchup_table(
        images, refs, criteria, kind, threads=args.threads
    )
    if args.format == "json-lines":
        payload = "".join(
            canonical_json(
                {
                    "image_id": m.image_id,
                    "swh_m": m.swh_m,
                    "wind_speed_ms": m.wind_speed_ms,
                    "wind_dir_deg": m.wind_dir_deg,
                    "dt_s": m.dt_s,
                    "distance_km": m.distance_km,
                    "n_candidates": m.n_candidates,
                }
            )
            + "\n"
            for m in table.matchups
        )
        out_path = out_dir / f"matchups_{args.task}.jsonl"
    else:
        payload = coloc.write_matchup_csv(table)
        out_path = out_dir / f"matchups_{args.task}.csv"
    atomic_write_text(out_path, payload)
    summary = table.summary()
    summary["seed"] = args.seed
    atomic_write_text(
        out_dir / f"colocate_{args.task}.summary.json",
        json.dumps(summary, indent=2, sort_keys=True) + "\n",
    )
    crit = criteria.describe()
    print(
        f"criteria: max_dt_s={crit['max_dt_s']} gate={crit['spatial_gate']} "
        f"flags_clear={crit['require_flags_clear']} tie={crit['tie_break']}"
    )
    print(
        f"matched {len(table.matchups)}/{table.n_images} images "
        f"(match rate {table.match_rate:.3f})"
    )
    return EXIT_OK


_TASK_LABEL_KIND = {
    "classification": "class",
    "regression": "scalar",
    "circular_regression": "angle",
}
_TASK_PROBE_KIND = {
    "classification": "knn_classify",
    "regression": "knn_regress",
    "circular_regression": "ridge_circular",
}


def cmd_eval(args, config: dict, out_dir: Path) -> int:
    manifest = rr.load_manifest(_read_text(args.manifest))
    base = f"eval_{manifest.name}_v{manifest.version}_{args.model_tag}"

    if manifest.task == "detection":
        if not args.preds or not args.gts:
            raise ParseError("detection task needs --preds and --gts")
        preds_text = _read_text(args.preds)
        gts_text = _read_text(args.gts)
        dset = detect_eval.detection_set_from_csv(preds_text, gts_text)
        det = detect_eval.evaluate_detection_benchmark(
            dset, args.iou_thresh, args.score_thresh
        )
        report = detect_eval.detection_metric_report(
            det,
            benchmark=manifest.name,
            benchmark_version=manifest.version,
            model_tag=args.model_tag,
            dataset_digest=digest_of({"preds": preds_text, "gts": gts_text}),
            seed=args.seed,
        )
        per_image = json.dumps(det.per_image, indent=2, sort_keys=True) + "\n"
        atomic_write_text(out_dir / f"{base}.per_image.json", per_image)
        curve_lines = ["score_thresh,precision,recall"] + [
            f"{repr(s)},{repr(p)},{repr(r)}" for s, p, r in det.pr_curve
        ]
        atomic_write_text(out_dir / f"{base}.pr_curve.csv", "\n".join(curve_lines) + "\n")
    else:
        probe_kind = args.probe_kind or _TASK_PROBE_KIND[manifest.task]
        if probes.KIND_NEEDS[probe_kind] != _TASK_LABEL_KIND[manifest.task]:
            raise ParseError(
                f"probe {probe_kind!r} cannot evaluate task {manifest.task!r}"
            )
        es = embed_store.parse_embedding_file(_read_bytes(args.embeddings))
        classes = (
            tuple(args.classes.split(";"))
            if args.classes
            else embed_store.TENGEOP_CLASSES
        )
        table = embed_store.parse_label_csv(
            _read_text(args.labels),
            kind=_TASK_LABEL_KIND[manifest.task],
            classes=classes,
        )
        labeled = embed_store.join_labels(es, table)
        train_ids, test_ids = manifest.materialize(labeled.image_ids)
        train = _subset(labeled, train_ids)
        test = _subset(labeled, test_ids)
        cfg = _probe_config(args, config, probe_kind)
        result = probes.run_probe_benchmark(
            train,
            test,
            cfg,
            benchmark=manifest.name,
            benchmark_version=manifest.version,
            model_tag=args.model_tag,
            seed=args.seed,
        )
        report = result.report
        pred_lines = ["image_id,prediction"] + [
            f"{image_id},{p if isinstance(p, str) else repr(p)}"
            for image_id, p in zip(test.image_ids, result.predictions)
        ]
        atomic_write_text(out_dir / f"{base}.predictions.csv", "\n".join(pred_lines) + "\n")

    atomic_write_text(out_dir / f"{base}.report.jsonl", rr.emit_report([report]))
    atomic_write_text(
        out_dir / f"{base}.report.txt", rr.emit_report([report], fmt="table")
    )
    for name in sorted(report.metrics):
        print(f"{name} = {report.metrics[name]:.{report.display_precision}f}")
    return EXIT_OK


def _subset(labeled: embed_store.LabeledSet, ids) -> embed_store.LabeledSet:
    pos = {image_id: i for i, image_id in enumerate(labeled.image_ids)}
    rows = [pos[i] for i in ids]
    return embed_store.LabeledSet(
        image_ids=tuple(ids),
        vectors=labeled.vectors[rows],
        kind=labeled.kind,
        y=labeled.y[rows],
        classes=labeled.classes,
        unit=labeled.unit,
    )


def cmd_prune(args, config: dict, out_dir: Path) -> int:
    es = embed_store.parse_embedding_file(_read_bytes(args.embeddings))
    section = dict(config.get("prune", {}))
    cfg = pruning.PruneConfig(
        target_size=args.target_size,
        metric=args.metric or section.get("metric", "euclidean"),
        seed_strategy=args.seed_strategy
        or section.get("seed_strategy", "medoid"),
        seed_index=args.seed_index
        if args.seed_index is not None
        else section.get("seed_index", 0),
    )
    result = pruning.kcenter_greedy(es, cfg)
    atomic_write_text(out_dir / "prune.csv", pruning.prune_csv(result, es.image_ids))
    atomic_write_text(
        out_dir / "prune_radius.csv", pruning.radius_trace_csv([result])
    )
    print(
        f"selected {len(result.selected)}/{len(es)} "
        f"(coverage radius {result.coverage_radius:.6g})"
    )
    return EXIT_OK


def cmd_simmap(args, config: dict, out_dir: Path) -> int:
    es = embed_store.parse_embedding_file(_read_bytes(args.embeddings))
    if es.patch_grids is None:
        raise ParseError("embedding file has no patch grids")
    idx = es.index_of(args.image_id)
    smap = simmap.similarity_map(es.patch_grids[idx], (args.ref_row, args.ref_col))
    modes = ["none", "minmax"] if args.normalization == "both" else [args.normalization]
    for mode in modes:
        pgm, csv_text = simmap.export_map(smap, normalization=mode)
        stem = f"simmap_{args.image_id}_{mode}"
        atomic_write_bytes(out_dir / f"{stem}.pgm", pgm)
        atomic_write_text(out_dir / f"{stem}.csv", csv_text)
    print(
        f"similarity map {smap.rows}x{smap.cols} ref=({args.ref_row},{args.ref_col}) "
        f"value_at_ref={smap.values[args.ref_row, args.ref_col]:.6f}"
    )
    return EXIT_OK


def cmd_report(args, config: dict, out_dir: Path) -> int:
    reports: list[rr.MetricReport] = []
    for path in args.inputs:
        reports.extend(rr.parse_report(_read_text(path)))
    if args.format == "csv":
        text = rr.reports_to_csv(reports)
        out_path = out_dir / "report.csv"
    else:
        text = rr.emit_report(reports)
        out_path = out_dir / "report.jsonl"
    atomic_write_text(out_path, text)
    table = rr.emit_report(reports, fmt="table", sort_by=args.sort_by)
    atomic_write_text(out_dir / "report.txt", table)
    sys.stdout.write(table)
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oswb",
        description="Ocean SAR embedding workbench",
    )
    parser.add_argument("--config", help="JSON config file with probe/coloc/prune sections")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED,
                        help="64-bit seed recorded in every output (default %(default)s)")
    parser.add_argument("--threads", type=int, default=1,
                        help="upper bound on worker threads (results never depend on it)")
    parser.add_argument("--format", choices=["csv", "json-lines"], default="csv",
                        help="tabular output format")
    parser.add_argument("--out", default=None,
                        help=f"output directory (default ${OUT_DIR_ENV} or '.')")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse + validate embeddings, labels, metadata")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--meta")
    p.add_argument("--label-kind", choices=["class", "scalar", "angle"], default="class")
    p.add_argument("--classes", help="semicolon-joined class names (default: the ten geophysical categories)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("colocate", help="build a matchup table from metadata + references")
    p.add_argument("--meta", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--task", choices=["swh", "wind"], required=True)
    p.add_argument("--max-dt-s", type=int, default=None)
    gate = p.add_mutually_exclusive_group()
    gate.add_argument("--box-deg", type=float, default=None,
                      help="lat/lon box half-width in degrees")
    gate.add_argument("--radius-km", type=float, default=None,
                      help="great-circle radius gate in km")
    gate.add_argument("--footprint", action="store_true",
                      help="use each image's footprint square")
    p.add_argument("--require-clear", default=None,
                   help="semicolon-joined flag names that must be clear ('*' = all)")
    p.add_argument("--tie-break", choices=["closest", "mean"], default=None)
    p.set_defaults(func=cmd_colocate)

    p = sub.add_parser("eval", help="run a benchmark manifest and write reports")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-tag", default="unknown")
    p.add_argument("--embeddings")
    p.add_argument("--labels")
    p.add_argument("--classes")
    p.add_argument("--preds", help="detection predictions CSV")
    p.add_argument("--gts", help="detection ground-truth CSV")
    p.add_argument("--probe-kind", choices=list(probes.PROBE_KINDS), default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--metric", choices=["cosine", "euclidean"], default=None)
    p.add_argument("--weighting", choices=["uniform", "softmax"], default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--ridge-lambda", type=float, default=None)
    p.add_argument("--normalize", action="store_true",
                   help="L2-normalize embeddings before probing")
    p.add_argument("--iou-thresh", type=float, default=0.1)
    p.add_argument("--score-thresh", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prune", help="diversity-select a subset of the dataset")
    p.add_argument("--embeddings", required=True)
    p.add_argument("-m", "--target-size", type=int, required=True)
    p.add_argument("--metric", choices=["euclidean", "cosine_distance"], default=None)
    p.add_argument("--seed-strategy", choices=["medoid", "fixed_index"], default=None)
    p.add_argument("--seed-index", type=int, default=None)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("simmap", help="patch similarity map for one image")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--ref-row", type=int, required=True)
    p.add_argument("--ref-col", type=int, required=True)
    p.add_argument("--normalization", choices=["none", "minmax", "both"],
                   default="both")
    p.set_defaults(func=cmd_simmap)

    p = sub.add_parser("report", help="merge and render metric reports")
    p.add_argument("inputs", nargs="+", help="report JSON-lines files")
    p.add_argument("--sort-by", default=None, help="metric column to rank models by")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2
        return int(exc.code or 0)
    try:
        config = _load_config(args.config)
        out_dir = Path(args.out or os.environ.get(OUT_DIR_ENV, "."))
        out_dir.mkdir(parents=True, exist_ok=True)
        resolved = {
            "command": args.command,
            "seed": args.seed,
            "threads": args.threads,
            "format": args.format,
            "args": {
                k: v
                for k, v in sorted(vars(args).items())
                if k not in ("func", "config") and not callable(v)
            },
        }
        _write_resolved_config(out_dir, args.command, resolved)
        return args.func(args, config, out_dir)
    except WorkbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
