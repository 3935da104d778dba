"""Patch-based CNN diagnosis of confocal microscopy images, written on numpy."""

from .dataio import ImageSample, Label, Patch, SplitDataset, generate_synthetic, load_image, split, tile
from .diagnosis import DiagnosisReport, PatchDecision, color_bucket, diagnose, render_overlay
from .evaluation import ConfusionMatrix, accumulate, metrics
from .network import NetworkModel, model_backward, model_forward
from .tensor import make_rng
from .training import AdamConfig, TrainReport, adam_step, train

__all__ = [
    "AdamConfig",
    "ConfusionMatrix",
    "DiagnosisReport",
    "ImageSample",
    "Label",
    "NetworkModel",
    "Patch",
    "PatchDecision",
    "SplitDataset",
    "TrainReport",
    "accumulate",
    "adam_step",
    "color_bucket",
    "diagnose",
    "generate_synthetic",
    "load_image",
    "make_rng",
    "metrics",
    "model_backward",
    "model_forward",
    "render_overlay",
    "split",
    "tile",
    "train",
]
