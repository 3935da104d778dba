"""Dense float64 arrays and the seeded generator shared by the whole pipeline.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 in C (row-major)
order.  The helpers here add the checks the rest of the package relies on:
reshapes that refuse to change the element count, shape-preserving maps, and
random fills driven by a single documented generator.

The generator is numpy's ``PCG64`` bit generator wrapped in a ``Generator``.
PCG64 produces the same stream on every platform for a given seed, which is
what makes training runs bit-reproducible.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeMismatch

Tensor = np.ndarray
Rng = np.random.Generator

DTYPE = np.float64


def make_rng(seed: int) -> Rng:
    """Return a PCG64-backed generator for a 64-bit unsigned seed."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(values, shape: Sequence[int] | None = None) -> Tensor:
    t = np.ascontiguousarray(values, dtype=DTYPE)
    if shape is not None:
        t = reshape(t, shape)
    return t


def reshape(t: Tensor, new_shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if any(s <= 0 for s in new_shape):
        raise ShapeMismatch(f"extents must be positive, got {new_shape}")
    if math.prod(new_shape) != t.size:
        raise ShapeMismatch(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def elementwise_map(t: Tensor, f: Callable[[float], float]) -> Tensor:
    """Apply a scalar function to every element; the output keeps ``t.shape``.

    ``f`` may also be a numpy ufunc, in which case it runs vectorized.
    """
    if isinstance(f, np.ufunc):
        return np.asarray(f(t), dtype=DTYPE)
    flat = np.fromiter((f(v) for v in np.ravel(t)), dtype=DTYPE, count=t.size)
    return flat.reshape(t.shape)


def fill_random(shape: Sequence[int], rng: Rng, scale: float) -> Tensor:
    """I.i.d. zero-mean Gaussian values with standard deviation ``scale``."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return rng.standard_normal(tuple(shape)) * scale


def he_scale(fan_in: int) -> float:
    # For layers followed by ReLU.
    return math.sqrt(2.0 / fan_in)


def lecun_scale(fan_in: int) -> float:
    return math.sqrt(1.0 / fan_in)
