"""Shapley-value attribution (Monte-Carlo and exact) and permutation importance.

A feature that is "absent" from a coalition takes its value from background
rows; the coalition value is the model output averaged over the background.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import models
from .errors import InputError

SCALES = ("probability", "log-odds")


def _as_function(model, scale: str):
    if scale not in SCALES:
        raise InputError(f"unknown attribution scale {scale!r}")
    if isinstance(model, models.TrainedModel):
        def base(x):
            return models.predict_proba(model, x)
    elif callable(model):
        def base(x):
            out = np.asarray(model(x), dtype=float)
            return out[:, None] if out.ndim == 1 else out
    else:
        raise InputError("model must be a TrainedModel or a callable")
    if scale == "probability":
        return base

    def logodds(x):
        p = np.clip(base(x), 1e-12, 1.0 - 1e-12)
        return np.log(p) - np.log1p(-p)
    return logodds


def _check_inputs(background, instance):
    bg = np.atleast_2d(np.asarray(background, dtype=float))
    x = np.asarray(instance, dtype=float).ravel()
    if bg.shape[0] == 0:
        raise InputError("background set is empty")
    if bg.shape[1] != x.shape[0]:
        raise InputError(f"instance has {x.shape[0]} features, background {bg.shape[1]}")
    return bg, x


@dataclass
class ShapleyEstimate:
    values: np.ndarray  # (d, C)
    std_error: np.ndarray  # (d, C)
    baseline: np.ndarray  # (C,)
    prediction: np.ndarray  # (C,)
    n_permutations: int
    scale: str


def shapley_values(model, background, instance, n_permutations: int = 200, seed: int = 0,
                   scale: str = "probability", background_draws: int | None = None,
                   chunk: int = 32) -> ShapleyEstimate:
    """Permutation-sampling Shapley estimate for every output class at once.

    With ``background_draws=None`` each coalition is valued over the whole
    background, so every sampled permutation satisfies efficiency exactly.
    Otherwise each permutation uses ``background_draws`` random background rows.
    """
    if n_permutations < 1:
        raise InputError("n_permutations must be >= 1")
    f = _as_function(model, scale)
    bg, x = _check_inputs(background, instance)
    d = len(x)
    rng = np.random.default_rng(seed)
    perms = np.array([rng.permutation(d) for _ in range(n_permutations)])
    draws = None
    if background_draws is not None:
        if background_draws < 1:
            raise InputError("background_draws must be >= 1")
        draws = rng.integers(0, len(bg), size=(n_permutations, background_draws))

    contrib = []
    for start in range(0, n_permutations, chunk):
        block = perms[start:start + chunk]
        P = len(block)
        rows = bg if draws is None else None
        B = len(bg) if draws is None else background_draws
        # mask[p, k, j]: feature j present after the first k features of permutation p
        rank = np.argsort(block, axis=1)
        mask = rank[:, None, :] < np.arange(d + 1)[None, :, None]
        if rows is None:
            z = bg[draws[start:start + P]]  # (P, B, d)
            z = np.broadcast_to(z[:, None], (P, d + 1, B, d))
        else:
            z = np.broadcast_to(rows[None, None], (P, d + 1, B, d))
        xs = np.where(mask[:, :, None, :], x[None, None, None, :], z)
        out = f(xs.reshape(-1, d))
        v = out.reshape(P, d + 1, B, -1).mean(axis=2)  # (P, d+1, C)
        step = np.diff(v, axis=1)  # marginal contribution of block[p, k]
        c = np.empty_like(step)
        c[np.arange(P)[:, None], block] = step
        contrib.append(c)
    contrib = np.concatenate(contrib)  # (n_perm, d, C)
    values = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / math.sqrt(n_permutations) if n_permutations > 1 else np.full_like(values, np.inf)
    baseline = f(bg).mean(axis=0)
    pred = f(x[None])[0]
    return ShapleyEstimate(values, se, baseline, pred, n_permutations, scale)


def exact_shapley(model, background, instance, scale: str = "probability") -> np.ndarray:
    """Shapley values by enumerating all 2^d coalitions; returns ``(d, C)``."""
    f = _as_function(model, scale)
    bg, x = _check_inputs(background, instance)
    d = len(x)
    if d > 16:
        raise InputError("exact enumeration is limited to 16 features")
    subsets = np.array([[(s >> j) & 1 for j in range(d)] for s in range(2 ** d)], dtype=bool)
    xs = np.where(subsets[:, None, :], x[None, None, :], bg[None, :, :])
    v = f(xs.reshape(-1, d)).reshape(2 ** d, len(bg), -1).mean(axis=1)
    size = subsets.sum(axis=1)
    weight = np.array([math.factorial(k) * math.factorial(d - k - 1) / math.factorial(d) if k < d else 0.0
                       for k in range(d + 1)])
    phi = np.zeros((d, v.shape[1]))
    for j in range(d):
        without = np.flatnonzero(~subsets[:, j])
        with_j = without | (1 << j)
        phi[j] = (weight[size[without]][:, None] * (v[with_j] - v[without])).sum(axis=0)
    return phi


def stratified_background(x, labels, n: int = 100, seed: int = 0) -> np.ndarray:
    """Row indices of a class-stratified sample (proportional, at least one per class)."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    n = min(n, len(labels))
    alloc = np.maximum(1, np.floor(counts / counts.sum() * n).astype(int))
    order = np.argsort(-(counts / counts.sum() * n - np.floor(counts / counts.sum() * n)), kind="stable")
    i = 0
    while alloc.sum() < n:
        c = order[i % len(order)]
        if alloc[c] < counts[c]:
            alloc[c] += 1
        i += 1
    while alloc.sum() > n:
        c = int(np.argmax(alloc))
        alloc[c] -= 1
    rng = np.random.default_rng(seed)
    idx = [rng.choice(np.flatnonzero(labels == c), size=min(a, cnt), replace=False)
           for c, a, cnt in zip(classes, alloc, counts)]
    return np.sort(np.concatenate(idx))


def _metric(name):
    from .evaluation import per_class_auc

    if name == "accuracy":
        return lambda p, y: float(np.mean(np.argmax(p, axis=1) == y))
    if name == "mean_auc":
        return lambda p, y: float(np.nanmean(per_class_auc(p, y)))
    raise InputError(f"unknown metric {name!r}; use 'accuracy' or 'mean_auc'")


def permutation_importance(model, x, labels, metric: str = "accuracy", n_repeats: int = 5,
                           seed: int = 0, groups=None):
    """Mean metric drop after shuffling each feature (or each group of columns jointly).

    Returns ``(importance, std)`` with one entry per feature or group.
    """
    score = _metric(metric)
    f = _as_function(model, "probability")
    x = np.asarray(x, dtype=float)
    y = np.asarray(labels)
    groups = [[j] for j in range(x.shape[1])] if groups is None else [list(g) for g in groups]
    ref = score(f(x), y)
    rng = np.random.default_rng(seed)
    drops = np.zeros((len(groups), n_repeats))
    for r in range(n_repeats):
        for gi, g in enumerate(groups):
            xp = x.copy()
            perm = rng.permutation(len(x))
            xp[:, g] = x[perm][:, g]
            drops[gi, r] = ref - score(f(xp), y)
    return drops.mean(axis=1), drops.std(axis=1)


@dataclass
class AttributionResult:
    feature_names: list[str]
    class_names: list[str]
    instance_ids: list
    instance_class: np.ndarray
    values: np.ndarray  # (n_instances, d, C)
    baseline: np.ndarray
    scale: str
    n_permutations: int
    seed: int

    @property
    def mean_abs(self) -> np.ndarray:
        """``(C, d)`` mean |attribution| towards class c over instances explained for class c."""
        C, d = len(self.class_names), len(self.feature_names)
        out = np.zeros((C, d))
        for c in range(C):
            sel = self.instance_class == c
            if sel.any():
                out[c] = np.abs(self.values[sel, :, c]).mean(axis=0)
        return out

    def ranking(self) -> np.ndarray:
        """Rank (1 = most important) of each feature within each class."""
        m = self.mean_abs
        ranks = np.empty_like(m, dtype=np.int64)
        for c in range(m.shape[0]):
            order = sorted(range(m.shape[1]), key=lambda j: (-m[c, j], j))
            ranks[c, order] = np.arange(1, m.shape[1] + 1)
        return ranks

    def to_csv(self, path, provenance: dict | None = None) -> None:
        m, ranks = self.mean_abs, self.ranking()
        with open(path, "w", newline="") as fh:
            if provenance:
                for k in sorted(provenance):
                    fh.write(f"# {k}: {provenance[k]}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "feature", "mean_abs_attribution", "rank"])
            for c, cname in enumerate(self.class_names):
                for j in sorted(range(len(self.feature_names)), key=lambda j: ranks[c, j]):
                    w.writerow([cname, self.feature_names[j], f"{m[c, j]:.6g}", int(ranks[c, j])])

    def instances_json(self, top_k: int = 10, provenance: dict | None = None) -> str:
        doc = {"format": "flimcl-attribution/1", "scale": self.scale, "n_permutations": self.n_permutations,
               "seed": self.seed, "provenance": provenance or {}, "class_names": self.class_names,
               "baseline": [float(v) for v in self.baseline], "instances": []}
        for c, cname in enumerate(self.class_names):
            for k in np.flatnonzero(self.instance_class == c)[:top_k]:
                vals = self.values[k, :, c]
                doc["instances"].append({
                    "id": self.instance_ids[k], "class": cname,
                    "attribution": {n: float(f"{v:.6g}") for n, v in zip(self.feature_names, vals)},
                })
        return json.dumps(doc, indent=1, sort_keys=True)


def explain(model, x, labels, feature_names, class_names, instance_ids=None, per_class: int = 10,
            background_size: int = 100, n_permutations: int = 64, seed: int = 0,
            scale: str = "probability") -> AttributionResult:
    """Attributions for the ``per_class`` most confident correctly predicted points of each class."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    ids = list(range(len(x))) if instance_ids is None else list(instance_ids)
    bg = x[stratified_background(x, labels, background_size, seed)]
    f = _as_function(model, "probability")
    p = f(x)
    pred = np.argmax(p, axis=1)
    chosen, chosen_class = [], []
    for c in range(len(class_names)):
        cand = np.flatnonzero((labels == c) & (pred == c))
        if not len(cand):
            cand = np.flatnonzero(labels == c)
        cand = cand[np.lexsort((cand, -p[cand, c]))][:per_class]
        chosen.extend(cand.tolist())
        chosen_class.extend([c] * len(cand))
    vals = []
    for i, k in enumerate(chosen):
        est = shapley_values(model, bg, x[k], n_permutations, seed=seed * 100003 + i, scale=scale)
        vals.append(est.values)
    baseline = _as_function(model, scale)(bg).mean(axis=0)
    return AttributionResult(list(feature_names), list(class_names), [ids[k] for k in chosen],
                             np.asarray(chosen_class), np.asarray(vals), baseline, scale, n_permutations, seed)
