"""Quantile binning of landmark-localization uncertainty with isotonic error bounds."""

__version__ = "0.1.0"

from .binning import (
    BinAssignment,
    DomainError,
    InsufficientDataError,
    QuantileThresholds,
    TieWarning,
    UncErrTuple,
    assign_bin,
    assign_bins,
    bin_occupancy,
    fit_thresholds,
)
from .evaluation import (
    EvaluationReport,
    FoldMetrics,
    GroundTruthBins,
    aggregate_folds,
    bound_accuracy_per_bin,
    cumulative_error_curve,
    fold_metrics,
    ground_truth_bins,
    jaccard_per_bin,
    significance_tests,
    spearman_rho,
)
from .heatmap import (
    Amplitude,
    GaussianSpec,
    Heatmap,
    PixelCoord,
    RealCoord,
    argmax_coord,
    mean_heatmap,
    read_heatmap,
    render_gaussian,
)
from .isotonic import ErrorBounds, IsotonicFit, estimate_bounds, eval_isotonic, fit_isotonic
from .measures import Extraction, Measure, e_cpv, e_mha, extract, localization_error, s_mha
from .pipeline import BinningModel, apply_model, evaluate_fold, fit_model
from .synthetic import NoiseSpec, SyntheticConfig, end_to_end_synthetic, generate_cases, run_synthetic

__all__ = [
    "__version__",
    "aggregate_folds",
    "Amplitude",
    "apply_model",
    "argmax_coord",
    "assign_bin",
    "assign_bins",
    "bin_occupancy",
    "BinAssignment",
    "BinningModel",
    "bound_accuracy_per_bin",
    "cumulative_error_curve",
    "DomainError",
    "e_cpv",
    "e_mha",
    "end_to_end_synthetic",
    "ErrorBounds",
    "estimate_bounds",
    "eval_isotonic",
    "evaluate_fold",
    "EvaluationReport",
    "extract",
    "Extraction",
    "fit_isotonic",
    "fit_model",
    "fit_thresholds",
    "fold_metrics",
    "FoldMetrics",
    "GaussianSpec",
    "generate_cases",
    "ground_truth_bins",
    "GroundTruthBins",
    "Heatmap",
    "InsufficientDataError",
    "IsotonicFit",
    "jaccard_per_bin",
    "localization_error",
    "mean_heatmap",
    "Measure",
    "NoiseSpec",
    "PixelCoord",
    "QuantileThresholds",
    "read_heatmap",
    "RealCoord",
    "render_gaussian",
    "run_synthetic",
    "s_mha",
    "significance_tests",
    "spearman_rho",
    "SyntheticConfig",
    "TieWarning",
    "UncErrTuple",
]
