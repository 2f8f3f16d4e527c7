from .baseline import oracle_baseline, oracle_features
from .experiment import (
    ExperimentConfig,
    FoldResult,
    FusionConfig,
    PatchPreprocessor,
    SeriesPreprocessor,
    StageError,
    ViTConfig,
    build_report,
    fold_seed,
    load_config,
    load_experiment_cohort,
    run_experiment,
    train_fold,
)
from .folds import FoldPlan, stratified_kfold
from .metrics import METRICS, ConfusionMatrix, aggregate_folds, compute_metrics
from .report import compare_reports, fold_values, format_table, read_report, write_json
from .stats import two_sample_ttest

__all__ = [
    "METRICS", "ConfusionMatrix", "ExperimentConfig", "FoldPlan", "FoldResult", "FusionConfig",
    "PatchPreprocessor", "SeriesPreprocessor", "StageError", "ViTConfig", "aggregate_folds",
    "build_report", "compare_reports", "compute_metrics", "fold_seed", "fold_values", "format_table",
    "load_config", "load_experiment_cohort", "oracle_baseline", "oracle_features", "read_report", "run_experiment", "stratified_kfold",
    "train_fold", "two_sample_ttest", "write_json",
]
