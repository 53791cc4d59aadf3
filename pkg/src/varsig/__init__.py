"""Variance changepoint detection with post-selection p-values."""
from .core import (
    DegenerateInputError,
    DegenerateSegmentError,
    IntervalUnion,
    NumericalUnderflowError,
    PValueReport,
    TimeSeries,
    Window,
    phi_statistic,
    truncated_beta_tail_prob,
    two_sided_bounds,
    unconditional_p_value,
)
from .detect import (
    DetectionResult,
    DetectorConfig,
    binary_segmentation,
    cusum_stat,
    detect,
    lr_stat,
    pelt,
    wild_binary_segmentation,
)
from .estimators import PostSelectionVarianceTest, VarianceChangeDetector
from .exact import exact_p_value, selection_set
from .harness import Scenario, holm_bonferroni, load_scenario, run_detection_accuracy, run_qq
from .inference import InferenceSettings, changepoint_p_value, detect_and_test
from .mc import SamplerConfig, mc_p_value
from .perturb import PhiPath, decompose_w, perturb_series, reconstruct_squares
from .power import power_p_value, sample_w

__version__ = "0.1.0"

__all__ = [
    "DegenerateInputError", "DegenerateSegmentError", "DetectionResult", "DetectorConfig",
    "InferenceSettings", "IntervalUnion", "NumericalUnderflowError", "PValueReport", "PhiPath",
    "PostSelectionVarianceTest", "SamplerConfig", "Scenario", "TimeSeries", "VarianceChangeDetector",
    "Window", "binary_segmentation", "changepoint_p_value", "cusum_stat", "decompose_w", "detect",
    "detect_and_test", "exact_p_value", "holm_bonferroni", "load_scenario", "lr_stat", "mc_p_value",
    "pelt", "perturb_series", "phi_statistic", "power_p_value", "reconstruct_squares",
    "run_detection_accuracy", "run_qq", "sample_w", "selection_set", "truncated_beta_tail_prob",
    "two_sided_bounds", "unconditional_p_value", "wild_binary_segmentation",
]
