"""Experiment orchestration: config, pipeline, stability study, reports."""

from .config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    load_config,
    resolved_toml,
    write_resolved,
)
from .pipeline import (
    PipelineError,
    ensure_dataset,
    ensure_mil,
    ensure_segnet,
    faithfulness_report,
    run_pipeline,
    score_test_tiles,
    train_mil,
    train_segnet,
    val_slide_auc,
)
from .reports import (
    ReportError,
    SCORES_COLUMNS,
    SCORES_SCHEMA,
    STABILITY_COLUMNS,
    STABILITY_SCHEMA,
    parallel_map,
    read_csv,
    write_csv,
    write_json,
)
from .stability import (
    AREA_BIN_EDGES,
    DEFAULT_SHIFTS,
    OVERLAP_BIN_EDGES,
    PREDICTION_DIFF_BIN_EDGES,
    overlap_pair,
    prepare_mil,
    run_stability_study,
    summarize_pairs,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "apply_overrides",
    "load_config",
    "resolved_toml",
    "write_resolved",
    "PipelineError",
    "ensure_dataset",
    "ensure_mil",
    "ensure_segnet",
    "faithfulness_report",
    "run_pipeline",
    "score_test_tiles",
    "train_mil",
    "train_segnet",
    "val_slide_auc",
    "ReportError",
    "SCORES_COLUMNS",
    "SCORES_SCHEMA",
    "STABILITY_COLUMNS",
    "STABILITY_SCHEMA",
    "parallel_map",
    "read_csv",
    "write_csv",
    "write_json",
    "overlap_pair",
    "prepare_mil",
    "run_stability_study",
    "summarize_pairs",
    "AREA_BIN_EDGES",
    "DEFAULT_SHIFTS",
    "OVERLAP_BIN_EDGES",
    "PREDICTION_DIFF_BIN_EDGES",
]
