"""Adam, the squared-error loss and the epoch loop with validation early stopping."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataio import SplitDataset, augment_array, normalize_array
from .errors import EmptySplit, LengthMismatch, NonFiniteLoss, ShapeMismatch
from .network import NetworkModel, model_backward, model_forward, target_value
from .tensor import DTYPE, Rng, Tensor

INFERENCE_BATCH = 64


@dataclass(frozen=True)
class AdamConfig:
    alpha: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class AdamState:
    """Moment estimates for one parameter tensor."""

    m: Tensor
    v: Tensor
    t: int = 0

    @classmethod
    def zeros_like(cls, param: Tensor) -> "AdamState":
        return cls(np.zeros_like(param, dtype=DTYPE), np.zeros_like(param, dtype=DTYPE), 0)


def adam_step(params: Tensor, grads: Tensor, state: AdamState, cfg: AdamConfig) -> Tensor:
    """One bias-corrected Adam update, applied to ``params`` in place and returned."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeMismatch(f"adam_step: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.t += 1
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * grads
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - cfg.beta1**state.t)
    v_hat = state.v / (1.0 - cfg.beta2**state.t)
    params -= cfg.alpha * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return params


def gradient_descent_step(params: Tensor, grads: Tensor, alpha: float) -> Tensor:
    """Plain ``W <- W - alpha * dE/dW``, in place."""
    if params.shape != grads.shape:
        raise ShapeMismatch(f"params {params.shape} vs grads {grads.shape}")
    params -= alpha * grads
    return params


def loss(outputs: Sequence[float], targets: Sequence) -> float:
    """Half the summed squared error between outputs and 0/1 targets (control = 1)."""
    o = np.asarray(outputs, dtype=DTYPE).ravel()
    t = np.array([target_value(v) for v in targets], dtype=DTYPE)
    if o.size != t.size:
        raise LengthMismatch(f"{o.size} outputs vs {t.size} targets")
    if o.size == 0:
        raise LengthMismatch("loss needs at least one sample")
    return 0.5 * float(np.sum((o - t) ** 2))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float  # mean per-sample loss over the epoch
    val_accuracy: float
    seconds: float
    batch_losses: list = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "median_batch_loss": float(np.median(self.batch_losses)) if self.batch_losses else None,
            "val_accuracy": self.val_accuracy,
            "seconds": self.seconds,
        }


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    stopping_epoch: int
    best_epoch: int
    best_val_accuracy: float | None
    model: NetworkModel  # best-validation checkpoint

    def as_dict(self) -> dict:
        return {
            "epochs": [e.as_dict() for e in self.epochs],
            "stopping_epoch": self.stopping_epoch,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
        }


def predict(model: NetworkModel, patches: np.ndarray, batch_size: int = INFERENCE_BATCH) -> np.ndarray:
    """Control-class probabilities for already normalized patches ``[N, C, S, S]``."""
    out = np.empty(len(patches), dtype=DTYPE)
    for start in range(0, len(patches), batch_size):
        p, _ = model_forward(model, patches[start : start + batch_size], training=False)
        out[start : start + batch_size] = p
    return out


def patch_accuracy(model: NetworkModel, patches, batch_size: int = INFERENCE_BATCH) -> float:
    """Fraction of ``patches`` (a list of ``Patch``) whose hard label is right."""
    correct = 0
    for start in range(0, len(patches), batch_size):
        chunk = patches[start : start + batch_size]
        x = np.stack([normalize_array(p.pixels) for p in chunk])
        p, _ = model_forward(model, x, training=False)
        t = np.array([target_value(q.label) for q in chunk])
        correct += int(np.sum((p >= 0.5) == (t == 1.0)))
    return correct / len(patches)


def train(
    model: NetworkModel,
    data: SplitDataset,
    cfg: AdamConfig,
    rng: Rng,
    max_epochs: int = 10,
    augmentation: str = "random",
    min_epochs: int = 2,
    patience: int = 1,
    progress: Callable[[str], None] | None = print,
) -> TrainReport:
    """Mini-batch Adam on ``data.train``, early-stopped on ``data.validation``.

    ``model`` is updated in place; the returned report carries a copy of the
    parameters from the epoch with the best validation accuracy.

    ``augmentation`` selects how the eight dihedral variants enter an epoch:
    ``"random"`` draws one variant per patch per epoch, ``"full"`` uses all
    eight, ``"none"`` only the original orientation.
    """
    for name, split in (("train", data.train), ("validation", data.validation), ("test", data.test)):
        if not split:
            raise EmptySplit(f"{name} split is empty")
    if augmentation not in ("random", "full", "none"):
        raise ValueError(f"unknown augmentation mode {augmentation!r}")

    params = model.parameters()
    states = {name: AdamState.zeros_like(p) for name, p in params.items()}
    best = model.copy()
    best_acc = None
    best_epoch = 0
    stale = 0
    records: list[EpochRecord] = []
    n = len(data.train)

    for epoch in range(1, max_epochs + 1):
        started = time.perf_counter()
        if augmentation == "full":
            order = np.repeat(np.arange(n), 8)
            transforms = np.tile(np.arange(8), n)
            perm = rng.permutation(order.size)
            order, transforms = order[perm], transforms[perm]
        else:
            order = rng.permutation(n)
            if augmentation == "random":
                transforms = rng.integers(0, 8, size=n)
            else:
                transforms = np.zeros(n, dtype=int)

        batch_losses = []
        total = 0.0
        for start in range(0, order.size, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            x = np.stack(
                [
                    normalize_array(augment_array(data.train[i].pixels, k))
                    for i, k in zip(sel, transforms[start : start + cfg.batch_size])
                ]
            )
            labels = [data.train[i].label for i in sel]
            p, cache = model_forward(model, x, training=True, rng=rng)
            batch_loss = loss(p, labels)
            if not math.isfinite(batch_loss):
                raise NonFiniteLoss(
                    f"loss became {batch_loss} at epoch {epoch}, batch starting at sample {start}"
                )
            grads = model_backward(model, cache, labels)
            scale = 1.0 / len(sel)
            for name, g in grads.items():
                g *= scale
                if not np.all(np.isfinite(g)):
                    raise NonFiniteLoss(f"non-finite gradient for {name} at epoch {epoch}")
                adam_step(params[name], g, states[name], cfg)
            batch_losses.append(batch_loss * scale)
            total += batch_loss

        val_acc = patch_accuracy(model, data.validation)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=total / order.size,
            val_accuracy=val_acc,
            seconds=time.perf_counter() - started,
            batch_losses=batch_losses,
        )
        records.append(rec)
        if progress is not None:
            progress(
                f"epoch {epoch:3d}  loss {rec.train_loss:.6f}  val_acc {val_acc:.4f}  {rec.seconds:.1f}s"
            )

        if best_acc is None or val_acc > best_acc:
            best_acc, best_epoch, best = val_acc, epoch, model.copy()
            stale = 0
        else:
            stale += 1
        if epoch >= min_epochs and stale >= patience:
            break

    return TrainReport(
        epochs=records,
        stopping_epoch=len(records),
        best_epoch=best_epoch,
        best_val_accuracy=best_acc,
        model=best,
    )
