"""Surgical instrument segmentation: data, networks, loss, metrics, training and reports."""
from .data import Sample, Task, crop_frame, decode_prediction, encode_target, generate_synthetic, split_folds
from .inference import InferenceConfig, benchmark, predict_corpus, predict_mask, threshold_sweep
from .losses import combined_loss, cross_entropy, soft_jaccard
from .metrics import EvalReport, dice, evaluate, jaccard
from .models import ModelSpec, build_model, encoder_feature_shapes, load_checkpoint
from .training import TrainConfig, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "InferenceConfig",
    "ModelSpec",
    "Sample",
    "Task",
    "TrainConfig",
    "TrainLog",
    "benchmark",
    "build_model",
    "combined_loss",
    "crop_frame",
    "cross_entropy",
    "decode_prediction",
    "dice",
    "encode_target",
    "encoder_feature_shapes",
    "evaluate",
    "generate_synthetic",
    "jaccard",
    "load_checkpoint",
    "predict_corpus",
    "predict_mask",
    "soft_jaccard",
    "split_folds",
    "threshold_sweep",
    "train",
]
