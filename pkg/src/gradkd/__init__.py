"""Distillation of a toy single-stage detector guided by task-loss gradients.

Everything runs on a small numpy reverse-mode autodiff engine
(:mod:`gradkd.tensor`); see the README for the pipeline and CLI.
"""

from .bmfi import bmfi_loss, box_mask, channel_attention, spatial_attention
from .detector import (STUDENT_CONFIG, TEACHER_CONFIG, DetectorConfig, DetectorModel, GroundTruth,
                       build_detector, count_complexity, decode, detection_loss, forward)
from .distill import KdConfig, TrainConfig, distill_train, total_kd_loss, train_teacher
from .gkd import channel_gradient_weights, gkd_loss, minmax_normalize, target_map
from .metrics import iou, map50, mask_similarity
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "DetectorConfig", "DetectorModel", "GroundTruth", "TEACHER_CONFIG",
    "STUDENT_CONFIG", "build_detector", "forward", "detection_loss", "decode", "count_complexity",
    "channel_gradient_weights", "minmax_normalize", "target_map", "gkd_loss", "box_mask",
    "spatial_attention", "channel_attention", "bmfi_loss", "KdConfig", "TrainConfig",
    "total_kd_loss", "train_teacher", "distill_train", "iou", "map50", "mask_similarity",
]
