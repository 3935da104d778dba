"""Images, patches, augmentation, dataset splits and the synthetic corpus.

Pixel arrays are channels-first ``[C, H, W]`` float64 in ``[0, 1]``.  In the
default two-channel mode channel 0 is the collagen stain (green plane) and
channel 1 the nuclei stain (blue plane); the red plane is ignored.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from scipy import ndimage

from .errors import BadDimensions, InsufficientData
from .tensor import DTYPE, Rng, make_rng

PATCH = 64
IMAGE_SIZE = 1024


class Label(str, enum.Enum):
    CONTROL = "control"
    PATIENT = "patient"

    @classmethod
    def parse(cls, value) -> "Label":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass
class ImageSample:
    pixels: np.ndarray  # [C, H, W]
    label: Label | None
    source: str

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


@dataclass
class Patch:
    pixels: np.ndarray  # [C, 64, 64], a view into the source image
    origin: tuple[int, int]  # (row, col) of the top-left pixel
    label: Label | None
    source: str


@dataclass
class SplitDataset:
    train: list[Patch]
    validation: list[Patch]
    test: list[Patch]
    train_images: list[ImageSample] = field(repr=False)
    validation_images: list[ImageSample] = field(repr=False)
    test_images: list[ImageSample] = field(repr=False)

    def image_ids(self) -> dict[str, list[str]]:
        return {
            "train": [im.source for im in self.train_images],
            "validation": [im.source for im in self.validation_images],
            "test": [im.source for im in self.test_images],
        }


# ---------------------------------------------------------------------------
# tiling and normalization


def tile(image: ImageSample, size: int = PATCH) -> list[Patch]:
    """Non-overlapping ``size`` x ``size`` patches in row-major origin order."""
    if image.pixels.ndim != 3:
        raise BadDimensions(f"expected [C, H, W] pixels, got shape {image.pixels.shape}")
    _, h, w = image.pixels.shape
    if h == 0 or w == 0 or h % size or w % size:
        raise BadDimensions(f"image {image.source!r} is {h}x{w}, not a multiple of {size}")
    return [
        Patch(image.pixels[:, r : r + size, c : c + size], (r, c), image.label, image.source)
        for r in range(0, h, size)
        for c in range(0, w, size)
    ]


def untile(patches: Sequence[Patch]) -> np.ndarray:
    """Reassemble patches into the image they were cut from."""
    size = patches[0].pixels.shape[1]
    h = max(p.origin[0] for p in patches) + size
    w = max(p.origin[1] for p in patches) + size
    out = np.zeros((patches[0].pixels.shape[0], h, w), dtype=patches[0].pixels.dtype)
    for p in patches:
        r, c = p.origin
        out[:, r : r + size, c : c + size] = p.pixels
    return out


def normalize_array(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit population variance over all values; constant input gives zeros."""
    x = np.asarray(x, dtype=DTYPE)
    if x.size == 0 or x.max() == x.min():
        return np.zeros(x.shape, dtype=DTYPE)
    centered = x - x.mean()
    return centered / centered.std()


def normalize_patch(patch: Patch) -> Patch:
    return Patch(normalize_array(patch.pixels), patch.origin, patch.label, patch.source)


# ---------------------------------------------------------------------------
# dihedral augmentation
#
# Index k = 2*r + f: clockwise rotation by 90*(r+1) degrees, then a horizontal
# flip when f == 1.  Index 6 (rotation by 360, no flip) is the identity.

N_TRANSFORMS = 8
IDENTITY = 6
TRANSFORM_NAMES = tuple(
    f"rot{90 * (r + 1)}" + ("+flip" if f else "") for r in range(4) for f in (0, 1)
)


def augment_array(x: np.ndarray, k: int) -> np.ndarray:
    """Apply dihedral transform ``k`` to the trailing two (square) axes."""
    if not 0 <= k < N_TRANSFORMS:
        raise ValueError(f"transform index must be in 0..7, got {k}")
    r, f = divmod(int(k), 2)
    out = np.rot90(x, k=-(r + 1), axes=(-2, -1))
    if f:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(patch: Patch) -> list[Patch]:
    """The eight dihedral variants of ``patch`` in fixed order."""
    if patch.pixels.shape[-1] != patch.pixels.shape[-2]:
        raise BadDimensions("augmentation needs a square patch")
    return [
        Patch(augment_array(patch.pixels, k), patch.origin, patch.label, patch.source)
        for k in range(N_TRANSFORMS)
    ]


def compose_transforms(a: int, b: int) -> int:
    """Index of the transform equal to applying ``a`` and then ``b``."""
    probe = np.arange(9, dtype=DTYPE).reshape(3, 3)
    target = augment_array(augment_array(probe, a), b)
    for k in range(N_TRANSFORMS):
        if np.array_equal(augment_array(probe, k), target):
            return k
    raise AssertionError("dihedral transforms are not closed")  # unreachable


# ---------------------------------------------------------------------------
# splitting


def split_sizes(n: int, train_fraction: float = 0.8, validation_fraction: float = 0.1) -> tuple[int, int, int]:
    """(train, validation, test) image counts for ``n`` images.

    The training pool is ``floor(train_fraction * n)`` images, of which
    ``floor(validation_fraction * pool)`` (at least one) are held out for
    validation; the remaining images form the test split.
    """
    if n < 3:
        raise InsufficientData(f"need at least 3 images, got {n}")
    pool = math.floor(train_fraction * n + 1e-9)
    pool = min(max(pool, 2), n - 1)
    val = max(1, math.floor(validation_fraction * pool + 1e-9))
    val = min(val, pool - 1)
    return pool - val, val, n - pool


def _apportion(size: int, available: dict) -> dict:
    """Split ``size`` across classes proportionally, keeping every class present when possible."""
    total = sum(available.values())
    quotas = {c: size * a / total for c, a in available.items()}
    counts = {c: int(math.floor(q)) for c, q in quotas.items()}
    leftover = size - sum(counts.values())
    for c in sorted(quotas, key=lambda c: (counts[c] - quotas[c], c.value))[:leftover]:
        counts[c] += 1
    if size >= len(available):
        for c in available:
            if counts[c] == 0 and available[c] > 1:
                donor = max(counts, key=lambda d: (counts[d], d.value))
                counts[donor] -= 1
                counts[c] += 1
    return counts


def split(
    images: Sequence[ImageSample],
    rng: Rng,
    train_fraction: float = 0.8,
    validation_fraction: float = 0.1,
    patch_size: int = PATCH,
) -> SplitDataset:
    """Image-level, class-stratified split into train / validation / test patches."""
    labeled = [im for im in images if im.label is not None]
    classes = sorted({im.label for im in labeled}, key=lambda c: c.value)
    if len(labeled) < 3 or len(classes) < 2:
        raise InsufficientData(
            f"need at least 3 labeled images covering both classes, got {len(labeled)} "
            f"with classes {[c.value for c in classes]}"
        )
    n_train, n_val, n_test = split_sizes(len(labeled), train_fraction, validation_fraction)

    remaining = {}
    for c in classes:
        members = [i for i, im in enumerate(labeled) if im.label == c]
        remaining[c] = [members[j] for j in rng.permutation(len(members))]

    chosen = {}
    for name, size in (("test", n_test), ("validation", n_val)):
        counts = _apportion(size, {c: len(remaining[c]) for c in classes})
        picked = []
        for c in classes:
            picked += remaining[c][: counts[c]]
            remaining[c] = remaining[c][counts[c] :]
        chosen[name] = sorted(picked)
    chosen["train"] = sorted(i for c in classes for i in remaining[c])

    parts = {name: [labeled[i] for i in idx] for name, idx in chosen.items()}
    return SplitDataset(
        train=[p for im in parts["train"] for p in tile(im, patch_size)],
        validation=[p for im in parts["validation"] for p in tile(im, patch_size)],
        test=[p for im in parts["test"] for p in tile(im, patch_size)],
        train_images=parts["train"],
        validation_images=parts["validation"],
        test_images=parts["test"],
    )


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticParams:
    """Texture constants of the synthetic generator.  Counts are per 1024x1024 image."""

    background: float = 0.04
    noise_sigma: float = 0.03
    fiber_blur: float = 1.0
    # control: long, smoothly curved, locally aligned filaments
    control_fibers: int = 900
    control_length: int = 320
    control_brightness: tuple = (0.55, 0.95)
    control_turn_sigma: float = 0.03
    orientation_period: float = 700.0
    orientation_swing: float = 0.6
    # patient: short, randomly oriented, interrupted filaments plus precipitates
    patient_fibers: int = 700
    patient_length: tuple = (12, 50)
    patient_brightness: tuple = (0.25, 0.6)
    patient_turn_sigma: float = 0.15
    patient_gap_probability: float = 0.08
    precipitates: int = 1800
    precipitate_sigma: tuple = (1.0, 2.5)
    precipitate_brightness: tuple = (0.4, 1.0)
    # nuclei, shared by both classes
    nuclei: int = 45
    nucleus_axes: tuple = (7.0, 15.0)
    nucleus_brightness: tuple = (0.55, 0.9)
    nucleus_blur: float = 1.5


SYNTHETIC = SyntheticParams()


def _splat(canvas: np.ndarray, ys: np.ndarray, xs: np.ndarray, weights: np.ndarray) -> None:
    # bilinear splatting of point intensities into canvas, points outside are dropped
    h, w = canvas.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy, fx = ys - y0, xs - x0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            canvas.ravel()[:] += np.bincount(
                (yy[ok] * w + xx[ok]), weights=(weights * wy * wx)[ok], minlength=h * w
            )


def _trace(rng: Rng, size: int, n: int, lengths: np.ndarray, angle_of, turn_sigma: float, margin: float):
    """Random-walk filaments with unit steps; returns (ys, xs, fiber index, step index)."""
    y = rng.uniform(-margin, size + margin, n)
    x = rng.uniform(-margin, size + margin, n)
    drift = np.zeros(n)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    steps = int(lengths.max())
    ys = np.empty((steps, n))
    xs = np.empty((steps, n))
    for s in range(steps):
        ys[s], xs[s] = y, x
        drift += rng.normal(0.0, turn_sigma, n)
        theta = angle_of(y, x) + drift
        y = y + sign * np.sin(theta)
        x = x + sign * np.cos(theta)
    alive = np.arange(steps)[:, None] < lengths[None, :]
    fiber = np.broadcast_to(np.arange(n), (steps, n))
    step = np.broadcast_to(np.arange(steps)[:, None], (steps, n))
    return ys[alive], xs[alive], fiber[alive], step[alive]


def generate_synthetic(
    label: Label | str,
    rng: Rng,
    size: int = IMAGE_SIZE,
    params: SyntheticParams = SYNTHETIC,
    source: str | None = None,
) -> ImageSample:
    """A two-channel stand-in for a fibroblast culture image.

    Control images carry a dense mesh of long, gently curving, locally aligned
    bright filaments; patient images carry sparse short fragments with random
    orientation, gaps and punctate precipitates.  Both get the same nuclei
    model in channel 1 and additive Gaussian noise.
    """
    label = Label.parse(label)
    if size <= 0:
        raise BadDimensions("size must be positive")
    area = (size / IMAGE_SIZE) ** 2
    p = params
    fibers = np.zeros((size, size))

    if label is Label.CONTROL:
        n = max(1, round(p.control_fibers * area))
        base = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi, 2)
        k = 2 * np.pi / p.orientation_period

        def angle_of(y, x):
            return base + p.orientation_swing * np.sin(k * x + phase[0]) * np.cos(k * y + phase[1])

        lengths = np.full(n, p.control_length)
        ys, xs, idx, _ = _trace(rng, size, n, lengths, angle_of, p.control_turn_sigma, p.control_length / 2)
        brightness = rng.uniform(*p.control_brightness, n)
        _splat(fibers, ys, xs, brightness[idx])
    else:
        n = max(1, round(p.patient_fibers * area))
        angles = rng.uniform(0, 2 * np.pi, n)
        lengths = rng.integers(p.patient_length[0], p.patient_length[1] + 1, n)

        def angle_of(y, x, _angles=angles):
            return _angles

        ys, xs, idx, step = _trace(rng, size, n, lengths, angle_of, p.patient_turn_sigma, 0.0)
        brightness = rng.uniform(*p.patient_brightness, n)
        # interruptions: each point starts a dark gap with a small probability
        gaps = rng.random((int(lengths.max()), n)) < p.patient_gap_probability
        dark = ndimage.binary_dilation(gaps, structure=np.ones((7, 1), dtype=bool))[step, idx]
        _splat(fibers, ys, xs, brightness[idx] * ~dark)

        m = max(1, round(p.precipitates * area))
        dots = np.zeros((size, size))
        _splat(
            dots,
            rng.uniform(0, size, m),
            rng.uniform(0, size, m),
            rng.uniform(*p.precipitate_brightness, m),
        )
        sigma = rng.uniform(*p.precipitate_sigma)
        fibers += ndimage.gaussian_filter(dots, sigma) * (2 * np.pi * sigma**2)

    collagen = ndimage.gaussian_filter(fibers, p.fiber_blur) * (2.0 * p.fiber_blur)

    nuclei = np.zeros((size, size))
    count = max(1, round(p.nuclei * area))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(count):
        cy, cx = rng.uniform(0, size, 2)
        a, b = np.sort(rng.uniform(*p.nucleus_axes, 2))[::-1]
        phi = rng.uniform(0, np.pi)
        level = rng.uniform(*p.nucleus_brightness)
        r = int(math.ceil(a)) + 2
        y0, y1 = max(0, int(cy) - r), min(size, int(cy) + r + 1)
        x0, x1 = max(0, int(cx) - r), min(size, int(cx) + r + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        dy = yy[y0:y1, x0:x1] - cy
        dx = xx[y0:y1, x0:x1] - cx
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        nuclei[y0:y1, x0:x1] = np.maximum(nuclei[y0:y1, x0:x1], level * inside)
    nuclei = ndimage.gaussian_filter(nuclei, p.nucleus_blur)

    pixels = np.stack([collagen, nuclei]) + p.background
    pixels += rng.normal(0.0, p.noise_sigma, pixels.shape)
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return ImageSample(pixels, label, source or f"synthetic-{label.value}")


# ---------------------------------------------------------------------------
# PNG input / output

CHANNEL_MODES = ("2ch", "rgb")


def _scale_for(dtype, bit_depth: int | None) -> float:
    if bit_depth is not None:
        return float(2**bit_depth - 1)
    if dtype == np.uint8:
        return 255.0
    if dtype == np.uint16:
        return 65535.0
    raise BadDimensions(f"unsupported PNG sample type {dtype}")


def _read_png(path: Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read image {path}")
    return raw


def load_image(
    path: str | Path,
    label: Label | str | None = None,
    channels: str = "2ch",
    bit_depth: int | None = None,
) -> ImageSample:
    """Read an 8- or 16-bit PNG into ``[C, H, W]`` values in ``[0, 1]``.

    Colour files map green -> channel 0 and blue -> channel 1 in ``"2ch"``
    mode, or keep R, G, B in ``"rgb"`` mode.  A grayscale file whose name ends
    in ``.ch0.png`` is paired with the matching ``.ch1.png`` file.
    ``bit_depth`` overrides the container depth for rescaling (12 for raw
    detector data stored in 16-bit files).
    """
    path = Path(path)
    if channels not in CHANNEL_MODES:
        raise ValueError(f"channels must be one of {CHANNEL_MODES}")
    raw = _read_png(path)
    scale = _scale_for(raw.dtype, bit_depth)
    if raw.ndim == 2:
        if not path.name.endswith(".ch0.png"):
            raise BadDimensions(f"{path}: grayscale input must be a .ch0.png/.ch1.png pair")
        other = _read_png(path.with_name(path.name[: -len(".ch0.png")] + ".ch1.png"))
        if other.shape != raw.shape:
            raise BadDimensions(f"{path}: channel files differ in size")
        planes = [raw, other]
        if channels == "rgb":
            planes = [np.zeros_like(raw), raw, other]
    else:
        bgr = raw[:, :, :3]
        if channels == "2ch":
            planes = [bgr[:, :, 1], bgr[:, :, 0]]
        else:
            planes = [bgr[:, :, 2], bgr[:, :, 1], bgr[:, :, 0]]
    pixels = np.stack([np.asarray(pl, dtype=DTYPE) / scale for pl in planes])
    np.clip(pixels, 0.0, 1.0, out=pixels)
    lab = None if label is None else Label.parse(label)
    source = path.name[: -len(".ch0.png")] if path.name.endswith(".ch0.png") else path.stem
    return ImageSample(pixels, lab, f"{path.parent.name}/{source}")


def to_uint16_rgb(pixels: np.ndarray) -> np.ndarray:
    """Quantize a ``[C, H, W]`` image to 16-bit BGR for ``cv2.imwrite``."""
    q = np.round(np.clip(pixels, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if q.shape[0] == 2:
        return np.stack([q[1], q[0], np.zeros_like(q[0])], axis=-1)  # B, G, R
    return np.stack([q[2], q[1], q[0]], axis=-1)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), to_uint16_rgb(pixels)):
        raise OSError(f"cannot write {path}")


def load_corpus(root: str | Path, channels: str = "2ch", bit_depth: int | None = None) -> list[ImageSample]:
    """All labeled images under ``root/control`` and ``root/patient``, sorted by name."""
    root = Path(root)
    images = []
    for label in Label:
        folder = root / label.value
        if not folder.is_dir():
            continue
        for path in sorted(folder.glob("*.png")):
            if path.name.endswith(".ch1.png"):
                continue
            images.append(load_image(path, label, channels, bit_depth))
    return images


def write_synthetic_corpus(
    out_dir: str | Path,
    count_per_class: int,
    seed: int,
    size: int = IMAGE_SIZE,
    params: SyntheticParams = SYNTHETIC,
) -> dict:
    """Write ``count_per_class`` images of each class plus ``manifest.json``; return the manifest."""
    out_dir = Path(out_dir)
    seeds = make_rng(seed).integers(0, 2**63, size=2 * count_per_class, dtype=np.uint64)
    entries = []
    for c, label in enumerate(Label):
        for i in range(count_per_class):
            image_seed = int(seeds[c * count_per_class + i])
            rel = f"{label.value}/{label.value}_{i:03d}.png"
            img = generate_synthetic(label, make_rng(image_seed), size, params)
            save_image(img.pixels, out_dir / rel)
            entries.append({"path": rel, "label": label.value, "seed": image_seed})
    manifest = {
        "generator": "patchcad.dataio.generate_synthetic",
        "seed": seed,
        "size": size,
        "count_per_class": count_per_class,
        "params": asdict(params),
        "images": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest
