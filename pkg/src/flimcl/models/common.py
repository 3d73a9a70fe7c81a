from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError, TrainingError


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        return cls(mean, sd)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.sd


@dataclass(frozen=True)
class TrainedModel:
    """Immutable fitted model. ``params`` maps names to arrays (kind-specific)."""

    kind: str
    n_features: int
    n_classes: int
    params: dict = field(repr=False)
    scaler: Standardizer = field(repr=False)
    seed: int = 0
    hyperparams: dict = field(default_factory=dict)


def check_xy(x, y=None, n_classes=None):
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim != 2:
        raise InputError(f"features must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("features contain NaN or infinite values")
    if y is None:
        return x
    y = np.asarray(y)
    if y.shape != (len(x),):
        raise InputError("labels and features disagree in length")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InputError("labels must be integers")
    y = y.astype(np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    if y.min() < 0 or y.max() >= n_classes:
        raise InputError("label out of range")
    if len(np.unique(y)) < 2:
        raise TrainingError("training needs at least two classes present")
    return x, y, n_classes


def balanced_class_weights(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-class weights inversely proportional to frequency (absent classes get 0)."""
    counts = np.bincount(y, minlength=n_classes).astype(float)
    present = counts > 0
    w = np.zeros(n_classes)
    w[present] = len(y) / (present.sum() * counts[present])
    return w


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def weighted_cross_entropy(p: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    eps = 1e-300
    return float(-(w * np.log(p[np.arange(len(y)), y] + eps)).sum() / w.sum())
