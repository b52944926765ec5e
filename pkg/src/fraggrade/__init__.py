"""Attention-gated fragment segmentation with interval-constrained ratio regression."""

from .data import DatasetSplit, ImageSample, PhantomConfig, build_split, generate_phantom, preprocess
from .grading import Grade, GradeInterval, grade_to_interval, mask_to_ratio, ratio_to_grade
from .losses import LossWeights, consistency_loss, range_loss, reg_loss, seg_loss, total_loss
from .model import FragmentNet, ModelConfig, ModelOutputs
from .training import (
    Checkpoint, PhaseConfig, build_model, freeze_backbone, train_full_mtl, train_phase1, train_phase2,
)

__all__ = [
    "DatasetSplit", "ImageSample", "PhantomConfig", "build_split", "generate_phantom", "preprocess",
    "Grade", "GradeInterval", "grade_to_interval", "mask_to_ratio", "ratio_to_grade",
    "LossWeights", "consistency_loss", "range_loss", "reg_loss", "seg_loss", "total_loss",
    "FragmentNet", "ModelConfig", "ModelOutputs",
    "Checkpoint", "PhaseConfig", "build_model", "freeze_backbone", "train_full_mtl", "train_phase1",
    "train_phase2",
]

__version__ = "0.1.0"
