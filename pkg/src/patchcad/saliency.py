"""Vanilla-gradient saliency for the input pixels and for each conv layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import Label
from .errors import BadLayerIndex
from .network import CONTROL_LOGIT, PATIENT_LOGIT, NetworkModel, backward_from_logits, model_forward


@dataclass
class SaliencyMap:
    values: np.ndarray  # [H, W] in [0, 1]
    target: Label
    raw: np.ndarray  # gradient before reduction, channels first

    def to_uint8(self) -> np.ndarray:
        return np.round(self.values * 255.0).astype(np.uint8)


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _logit_gradients(model: NetworkModel, patch: np.ndarray, target, input_grad: bool, layers: bool):
    target = Label.parse(target)
    _, cache = model_forward(model, patch, training=False)
    g = np.zeros((1, 2))
    g[0, CONTROL_LOGIT if target is Label.CONTROL else PATIENT_LOGIT] = 1.0
    _, extras = backward_from_logits(
        model, cache, g, input_grad=input_grad, parameter_grads=False, activation_grads=layers
    )
    return target, extras


def input_gradient(model: NetworkModel, patch: np.ndarray, target) -> np.ndarray:
    """d(class logit)/d(input pixels), shape ``[C, S, S]``."""
    _, extras = _logit_gradients(model, patch, target, input_grad=True, layers=False)
    return extras["input"][0]


def input_saliency(model: NetworkModel, patch: np.ndarray, target) -> SaliencyMap:
    target, extras = _logit_gradients(model, patch, target, input_grad=True, layers=False)
    raw = extras["input"][0]
    return SaliencyMap(minmax(np.abs(raw).max(axis=0)), target, raw)


def layer_saliency(model: NetworkModel, patch: np.ndarray, conv_index: int, target) -> SaliencyMap:
    """Saliency over the post-ReLU activation of conv layer 1, 2 or 3."""
    if conv_index not in (1, 2, 3):
        raise BadLayerIndex(f"conv layer index must be 1, 2 or 3, got {conv_index}")
    target, extras = _logit_gradients(model, patch, target, input_grad=False, layers=True)
    raw = extras[f"conv{conv_index}"][0]
    return SaliencyMap(minmax(np.abs(raw).max(axis=0)), target, raw)


def red_overlay(patch_rgb: np.ndarray, saliency: SaliencyMap, strength: float = 0.8) -> np.ndarray:
    """Blend saliency into the red plane of an 8-bit RGB patch rendering."""
    out = patch_rgb.astype(np.float64)
    s = saliency.values[..., None]
    red = np.array([255.0, 0.0, 0.0])
    out = out * (1.0 - strength * s) + red * (strength * s)
    return np.round(out).astype(np.uint8)
