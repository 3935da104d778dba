"""Whole-image diagnosis: tile, classify each patch, vote, score and draw."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass

import cv2
import numpy as np

from .dataio import PATCH, ImageSample, Label, normalize_array, tile
from .errors import BadDimensions, MismatchedReport, OutOfRange
from .network import NetworkModel
from .training import predict

BUCKETS = ("cyan", "steel_blue", "yellow", "orange", "red")
BUCKET_RGB = {
    "cyan": (0, 255, 255),
    "steel_blue": (70, 130, 180),
    "yellow": (255, 255, 0),
    "orange": (255, 165, 0),
    "red": (255, 0, 0),
}
FRAME_WIDTH = 3
FOOTER_HEIGHT = 48


@dataclass(frozen=True)
class PatchDecision:
    origin: tuple[int, int]
    p_control: float
    hard_label: Label
    bucket: str

    def as_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "p_control": self.p_control,
            "label": self.hard_label.value,
            "bucket": self.bucket,
        }


@dataclass
class DiagnosisReport:
    decisions: list[PatchDecision]
    overall_label: Label
    score: float  # percentage of patches classified as control
    bucket_counts: dict
    image_shape: tuple  # (H, W) of the diagnosed image
    source: str = ""
    model_checksum: str = ""

    @property
    def control_count(self) -> int:
        return sum(d.hard_label is Label.CONTROL for d in self.decisions)

    @property
    def patient_count(self) -> int:
        return len(self.decisions) - self.control_count

    def as_dict(self) -> dict:
        return {
            "source": self.source,
            "image_shape": list(self.image_shape),
            "overall_label": self.overall_label.value,
            "score": self.score,
            "control_patches": self.control_count,
            "patient_patches": self.patient_count,
            "bucket_counts": dict(self.bucket_counts),
            "model_checksum": self.model_checksum,
            "patches": [d.as_dict() for d in self.decisions],
        }


def color_bucket(p_control: float) -> str:
    """Colour class of a control probability; each boundary belongs to the lower bucket."""
    if not 0.0 <= p_control <= 1.0:
        raise OutOfRange(f"probability {p_control} outside [0, 1]")
    if p_control > 0.9:
        return "cyan"
    if p_control > 0.7:
        return "steel_blue"
    if p_control > 0.5:
        return "yellow"
    if p_control > 0.3:
        return "orange"
    return "red"


def hard_label(p_control: float) -> Label:
    return Label.CONTROL if p_control >= 0.5 else Label.PATIENT


def majority_vote(labels) -> Label:
    """Control only with a strict majority; a tie goes to patient."""
    counts = Counter(Label.parse(v) for v in labels)
    return Label.CONTROL if counts[Label.CONTROL] > counts[Label.PATIENT] else Label.PATIENT


def model_checksum(model: NetworkModel) -> str:
    h = hashlib.sha256()
    for name, value in model.parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return h.hexdigest()


def build_report(origins, probabilities, image_shape, source="", checksum="") -> DiagnosisReport:
    decisions = []
    for origin, p in zip(origins, probabilities):
        p = float(p)
        decisions.append(PatchDecision(tuple(int(v) for v in origin), p, hard_label(p), color_bucket(p)))
    n_control = sum(d.hard_label is Label.CONTROL for d in decisions)
    return DiagnosisReport(
        decisions=decisions,
        overall_label=majority_vote(d.hard_label for d in decisions),
        score=100.0 * n_control / len(decisions),
        bucket_counts={b: sum(d.bucket == b for d in decisions) for b in BUCKETS},
        image_shape=tuple(image_shape),
        source=source,
        model_checksum=checksum,
    )


def diagnose(model: NetworkModel, image: ImageSample) -> DiagnosisReport:
    patches = tile(image, model.patch_size)
    if image.pixels.shape[0] != model.in_channels:
        raise BadDimensions(f"image has {image.pixels.shape[0]} channels, model expects {model.in_channels}")
    x = np.stack([normalize_array(p.pixels) for p in patches])
    probs = predict(model, x)
    return build_report(
        [p.origin for p in patches], probs, image.pixels.shape[1:], image.source, model_checksum(model)
    )


def display_rgb(pixels: np.ndarray) -> np.ndarray:
    """8-bit RGB rendering of ``[C, H, W]`` pixels: collagen green, nuclei blue."""
    q = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.shape[0] == 2:
        return np.stack([np.zeros_like(q[0]), q[0], q[1]], axis=-1)
    if q.shape[0] == 3:
        return np.moveaxis(q, 0, -1).copy()
    return np.repeat(q[0][..., None], 3, axis=-1)


def frame_mask(height: int, width: int, cell: int = PATCH, frame: int = FRAME_WIDTH) -> np.ndarray:
    """True on pixels within ``frame`` of a cell border."""
    r = np.arange(height) % cell
    c = np.arange(width) % cell
    rows = (r < frame) | (r >= cell - frame)
    cols = (c < frame) | (c >= cell - frame)
    return rows[:, None] | cols[None, :]


def render_overlay(image: ImageSample, report: DiagnosisReport, cell: int = PATCH) -> np.ndarray:
    """RGB uint8 array ``[H + FOOTER_HEIGHT, W, 3]`` with framed cells and a result footer."""
    h, w = image.pixels.shape[1:]
    if tuple(report.image_shape) != (h, w) or len(report.decisions) != (h // cell) * (w // cell):
        raise MismatchedReport(f"report for {report.image_shape} does not match image {h}x{w}")
    base = display_rgb(image.pixels)
    mask = frame_mask(cell, cell)
    for d in report.decisions:
        r, c = d.origin
        if r % cell or c % cell or r >= h or c >= w:
            raise MismatchedReport(f"decision origin {d.origin} is not on the {cell}-grid")
        base[r : r + cell, c : c + cell][mask] = BUCKET_RGB[d.bucket]

    footer = np.zeros((FOOTER_HEIGHT, w, 3), dtype=np.uint8)
    text = f"{report.overall_label.value.upper()}  control score {report.score:.2f}%"
    color = BUCKET_RGB["cyan"] if report.overall_label is Label.CONTROL else BUCKET_RGB["red"]
    scale = 0.5 if w < 512 else 1.0
    cv2.putText(footer, text, (8, FOOTER_HEIGHT - 14), cv2.FONT_HERSHEY_SIMPLEX, scale, color, 1, cv2.LINE_8)
    return np.concatenate([base, footer], axis=0)


def write_png_rgb(rgb: np.ndarray, path) -> None:
    if not cv2.imwrite(str(path), np.ascontiguousarray(rgb[..., ::-1])):
        raise OSError(f"cannot write {path}")
