"""Decision layer for foreground/background decomposed recognition.

Works on precomputed logits: calibration, two-input fusion, metadata priors,
FG/BG view construction, top-k rescoring, metrics and a synthetic benchmark.
"""

__version__ = "0.1.0"

from .calibration import (
    CalibrationParams,
    EceReport,
    cross_entropy,
    expected_calibration_error,
    fit_classwise_temperatures,
    fit_temperature,
    scale_logits,
    softmax,
)
from .core_data import (
    AlignedSplit,
    DatasetManifest,
    LabelTable,
    LogitTable,
    MeanStd,
    MetadataTable,
    ValidationError,
    align,
    average_seed_runs,
    load_labels,
    load_logits,
    load_manifest,
    load_metadata,
)
from .fusion import (
    METHODS,
    FusionModel,
    FusionPrediction,
    fit_all,
    fit_fusion,
    fuse_max,
    fuse_threshold,
    oracle_accuracy,
    select_fusion,
)
from .metadata_prior import PriorTable, estimate_priors, reweight
from .metrics import EvalReport, accuracy, evaluate, macro_accuracy, per_class_delta
from .synthbench import SynthConfig, generate, simulate

__all__ = [
    "CalibrationParams",
    "EceReport",
    "cross_entropy",
    "expected_calibration_error",
    "fit_classwise_temperatures",
    "fit_temperature",
    "scale_logits",
    "softmax",
    "AlignedSplit",
    "DatasetManifest",
    "LabelTable",
    "LogitTable",
    "MeanStd",
    "MetadataTable",
    "ValidationError",
    "align",
    "average_seed_runs",
    "load_labels",
    "load_logits",
    "load_manifest",
    "load_metadata",
    "METHODS",
    "FusionModel",
    "FusionPrediction",
    "fit_all",
    "fit_fusion",
    "fuse_max",
    "fuse_threshold",
    "oracle_accuracy",
    "select_fusion",
    "PriorTable",
    "estimate_priors",
    "reweight",
    "EvalReport",
    "accuracy",
    "evaluate",
    "macro_accuracy",
    "per_class_delta",
    "SynthConfig",
    "generate",
    "simulate",
    "__version__",
]
