"""oswb: benchmarking workbench for ocean-SAR foundation-model embeddings."""

from .embed_store import (
    EmbeddingSet,
    GeoMeta,
    LabelTable,
    LabeledSet,
    TENGEOP_CLASSES,
    join_labels,
    l2_normalize,
    parse_embedding_file,
    pool_patch_grid,
    write_embedding_file,
)
from .coloc import (
    ColocCriteria,
    Matchup,
    MatchupTable,
    RefMeasurement,
    build_index,
    build_matchup_table,
    haversine_km,
    match_swh,
    match_wind,
)
from .probes import (
    ProbeConfig,
    ProbeResult,
    circular_fit,
    circular_predict,
    knn_classify,
    knn_regress,
    ridge_fit,
    ridge_predict,
    run_probe_benchmark,
)
from .detect_eval import (
    Box,
    DetectionSet,
    evaluate_detection_benchmark,
    f1,
    iou,
    match_detections,
)
from .pruning import PruneConfig, PruneResult, coverage_radius, kcenter_greedy, simulate_schedule
from .simmap import SimilarityMap, cosine_similarity, export_map, similarity_map
from .registry_report import (
    BenchmarkManifest,
    ManifestRegistry,
    MetricReport,
    accuracy_pct,
    bias,
    circular_error_deg,
    emit_report,
    load_manifest,
    mae,
    materialize_split,
    parse_report,
    rmse,
    validate_manifest,
)

__version__ = "0.1.0"
