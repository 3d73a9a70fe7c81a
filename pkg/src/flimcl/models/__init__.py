"""Trainable probabilistic classifiers and the baseline-selection rule.

All models standardise features with statistics from the training split only
and weight the loss by inverse class frequency.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ..errors import InputError, TrainingError
from . import forest, mlp, softmax_reg
from .common import Standardizer, TrainedModel, balanced_class_weights, check_xy

KINDS = ("mlp", "random_forest", "softmax")

DEFAULT_HYPERPARAMS = {
    "mlp": {"hidden": [64, 32], "lr": 0.05, "momentum": 0.9, "batch_size": 128,
            "max_epochs": 150, "patience": 12, "l2": 1e-4, "val_fraction": 0.1},
    "random_forest": {"n_trees": 50, "max_depth": 12, "min_leaf": 5, "max_features": None},
    "softmax": {"l2": 1e-3, "max_iter": 500},
}

FORMAT = "flimcl-model/1"


@dataclass(frozen=True)
class ModelMetrics:
    accuracy: float
    auc: np.ndarray

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.auc))

    @property
    def selection_score(self) -> float:
        return 0.5 * (self.accuracy + self.mean_auc)


def _validation_split(groups, rng, fraction):
    uniq = sorted(set(groups))
    n_val = int(round(fraction * len(uniq)))
    if len(uniq) < 3 or n_val < 1:
        return None
    val_groups = set(rng.choice(np.array(uniq, dtype=object), size=n_val, replace=False).tolist())
    return np.array([g in val_groups for g in groups])


def train(kind: str, features, labels, hyperparams: dict | None = None, seed: int = 0,
          n_classes: int | None = None, groups=None, sample_weight=None) -> TrainedModel:
    """Fit one model. ``groups`` (patient ids) enables grouped early stopping for the MLP."""
    if kind not in KINDS:
        raise InputError(f"unknown model kind {kind!r}; choose from {KINDS}")
    x, y, n_classes = check_xy(features, labels, n_classes)
    hp = dict(DEFAULT_HYPERPARAMS[kind])
    unknown = set(hyperparams or {}) - set(hp)
    if unknown:
        raise InputError(f"unknown hyperparameter(s) for {kind}: {sorted(unknown)}")
    hp.update(hyperparams or {})
    rng = np.random.default_rng(seed)

    w = balanced_class_weights(y, n_classes)[y]
    if sample_weight is not None:
        sw = np.asarray(sample_weight, dtype=float)
        if sw.shape != y.shape or np.any(sw < 0):
            raise InputError("sample_weight must be nonnegative with one entry per row")
        w = w * sw

    scaler = Standardizer.fit(x)
    xs = np.ascontiguousarray(scaler(x))

    if kind == "mlp":
        val = None
        fit_mask = np.ones(len(y), dtype=bool)
        if groups is not None:
            vmask = _validation_split(list(groups), rng, hp["val_fraction"])
            if vmask is not None and len(np.unique(y[~vmask])) >= 2:
                val = (xs[vmask], y[vmask], w[vmask])
                fit_mask = ~vmask
        params = mlp.fit(xs[fit_mask], y[fit_mask], w[fit_mask], n_classes, rng,
                         hidden=tuple(hp["hidden"]), lr=hp["lr"], momentum=hp["momentum"],
                         batch_size=hp["batch_size"], max_epochs=hp["max_epochs"],
                         patience=hp["patience"], l2=hp["l2"], val=val)
        params = {f"p{i}": p for i, p in enumerate(params)}
    elif kind == "softmax":
        params = softmax_reg.fit(xs, y, w, n_classes, l2=hp["l2"], max_iter=hp["max_iter"])
    else:
        params = forest.fit(xs, y, w, n_classes, rng, n_trees=hp["n_trees"], max_depth=hp["max_depth"],
                            min_leaf=hp["min_leaf"], max_features=hp["max_features"])
    for arr in params.values():
        arr.setflags(write=False)
    return TrainedModel(kind=kind, n_features=x.shape[1], n_classes=n_classes, params=params,
                        scaler=scaler, seed=seed, hyperparams=hp)


def predict_proba(model: TrainedModel, features) -> np.ndarray:
    x = check_xy(features)
    if x.shape[1] != model.n_features:
        raise InputError(f"model expects {model.n_features} features, got {x.shape[1]}")
    xs = np.ascontiguousarray(model.scaler(x))
    if model.kind == "mlp":
        n = len(model.params)
        p = mlp.predict([model.params[f"p{i}"] for i in range(n)], xs)
    elif model.kind == "softmax":
        p = softmax_reg.predict(model.params, xs)
    else:
        p = forest.predict(model.params, xs)
    return p / p.sum(axis=1, keepdims=True)


def predict(model: TrainedModel, features) -> np.ndarray:
    return np.argmax(predict_proba(model, features), axis=1)


def select_baseline(metrics: dict) -> str:
    """Kind maximising (accuracy + mean AUC) / 2; ties go to higher accuracy, then name."""
    if not metrics:
        raise InputError("no candidate models to select from")
    scored = []
    for kind, m in metrics.items():
        if not isinstance(m, ModelMetrics):
            m = ModelMetrics(float(m[0]), np.asarray(m[1], dtype=float))
        if len(m.auc) == 0 or not np.all(np.isfinite(m.auc)) or not math.isfinite(m.accuracy):
            raise InputError(f"incomplete metrics for {kind!r}")
        scored.append((-m.selection_score, -m.accuracy, kind))
    return sorted(scored)[0][2]


def to_json(model: TrainedModel) -> str:
    def enc(a):
        a = np.asarray(a)
        return {"shape": list(a.shape), "dtype": str(a.dtype), "data": a.ravel().tolist()}

    doc = {
        "format": FORMAT, "kind": model.kind, "n_features": model.n_features,
        "n_classes": model.n_classes, "seed": model.seed, "hyperparams": model.hyperparams,
        "standardization": {"mean": model.scaler.mean.tolist(), "sd": model.scaler.sd.tolist()},
        "params": {k: enc(v) for k, v in sorted(model.params.items())},
    }
    return json.dumps(doc, sort_keys=True)


def from_json(text: str) -> TrainedModel:
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise InputError(f"unsupported model format {doc.get('format')!r}")
    params = {k: np.asarray(v["data"], dtype=v["dtype"]).reshape(v["shape"]) for k, v in doc["params"].items()}
    scaler = Standardizer(np.asarray(doc["standardization"]["mean"]), np.asarray(doc["standardization"]["sd"]))
    return TrainedModel(kind=doc["kind"], n_features=doc["n_features"], n_classes=doc["n_classes"],
                        params=params, scaler=scaler, seed=doc["seed"], hyperparams=doc["hyperparams"])


__all__ = ["KINDS", "ModelMetrics", "TrainedModel", "TrainingError", "from_json", "predict",
           "predict_proba", "select_baseline", "to_json", "train"]
