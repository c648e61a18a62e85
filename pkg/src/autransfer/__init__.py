"""Two-stage transfer learning for facial action unit recognition.

Stage one trains a feature extractor on expression classification; stage
two reuses it under an AU multi-label head; per-AU thresholds are then
tuned for F1. Everything runs on a small float64 autodiff core.
"""

__version__ = "0.1.0"

from .calibration import ThresholdVector, apply_thresholds, calibrate_thresholds
from .data import Dataset, GenConfig, generate_synthetic, read_dataset, split_subject_folds, write_dataset
from .losses_metrics import MetricsReport, cross_entropy, f1_report, multi_label_loss
from .model import ModelConfig, ModelParameters, init_parameters, transfer_backbone
from .training import RunRecord, TrainConfig, run_pipeline

__all__ = [
    "Dataset",
    "GenConfig",
    "MetricsReport",
    "ModelConfig",
    "ModelParameters",
    "RunRecord",
    "ThresholdVector",
    "TrainConfig",
    "apply_thresholds",
    "calibrate_thresholds",
    "cross_entropy",
    "f1_report",
    "generate_synthetic",
    "init_parameters",
    "multi_label_loss",
    "read_dataset",
    "run_pipeline",
    "split_subject_folds",
    "transfer_backbone",
    "write_dataset",
]
