"""Landmark-detection training toolkit.

Point labels are dilated into regions, a U-Net is trained on them with a
dynamically re-weighted pixel-wise BCE loss, and the regions are eroded back
to points on a schedule. Ships with pixel RMSE / SDR evaluation, a synthetic
ellipse-scene generator, and a train/eval/generate/render CLI.
"""

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .curriculum import CurriculumSchedule, CurriculumState, dilation_level, make_targets, reweight
from .data import (
    DatasetManifest,
    ProcessedSample,
    RawSample,
    generate_synthetic,
    load_manifest,
    load_sample,
    pad_to_square,
    preprocess_sample,
    resize_to_standard,
    rotate_augment,
    save_dataset,
    split,
)
from .experiment import (
    ConfigError,
    DataError,
    ExperimentConfig,
    NumericError,
    RunRecord,
    evaluate_model,
    load_config,
    render_overlay,
    run_eval,
    run_generate,
    run_render,
    run_training,
)
from .metrics import (
    SDR_THRESHOLDS,
    EvalEntry,
    EvalReport,
    PredictedLandmark,
    build_report,
    distance,
    extract_landmark,
    mm_rmse,
    rmse,
    sdr,
    write_report_csv,
)
from .morphology import PointLabel, StructuringElement, count_true, dilate, erode, rasterize
from .optim import Adam
from .rng import RngState
from .unet import UNet, UNetConfig, load_encoder_weights, parameter_count

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CheckpointError",
    "ConfigError",
    "CurriculumSchedule",
    "CurriculumState",
    "DataError",
    "DatasetManifest",
    "EvalEntry",
    "EvalReport",
    "ExperimentConfig",
    "NumericError",
    "PointLabel",
    "PredictedLandmark",
    "ProcessedSample",
    "RawSample",
    "RunRecord",
    "RngState",
    "SDR_THRESHOLDS",
    "StructuringElement",
    "UNet",
    "UNetConfig",
    "build_report",
    "count_true",
    "dilate",
    "dilation_level",
    "distance",
    "erode",
    "evaluate_model",
    "extract_landmark",
    "generate_synthetic",
    "load_config",
    "load_encoder_weights",
    "load_manifest",
    "load_sample",
    "make_targets",
    "mm_rmse",
    "pad_to_square",
    "parameter_count",
    "preprocess_sample",
    "rasterize",
    "read_checkpoint",
    "render_overlay",
    "resize_to_standard",
    "reweight",
    "rmse",
    "rotate_augment",
    "run_eval",
    "run_generate",
    "run_render",
    "run_training",
    "save_dataset",
    "sdr",
    "split",
    "write_checkpoint",
    "write_report_csv",
]
