"""Leave-one-patient-out evaluation, confusion matrices, AUC and margin voting."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import models
from .errors import InputError, ManifestError, UndefinedAUCError


@dataclass(frozen=True)
class Fold:
    train_patients: tuple[str, ...]
    test_patients: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def masks(self, point_patients):
        """Yield ``(train_mask, test_mask)`` over points for every fold."""
        pp = np.asarray(point_patients, dtype=object)
        for fold in self.folds:
            test = np.isin(pp, np.array(fold.test_patients, dtype=object))
            train = np.isin(pp, np.array(fold.train_patients, dtype=object))
            yield train, test


def lopo_splits(manifest_or_ids) -> FoldPlan:
    """One fold per patient; accepts a DatasetManifest or a sequence of patient ids."""
    if hasattr(manifest_or_ids, "margins"):
        ids = []
        seen = {}
        for m in manifest_or_ids.margins:
            if m.patient_id in seen and seen[m.patient_id] != len(ids) - 1:
                raise ManifestError(f"duplicate patient id {m.patient_id!r} (non-contiguous patient block)")
            if m.patient_id not in seen:
                seen[m.patient_id] = len(ids)
                ids.append(m.patient_id)
    else:
        ids = list(manifest_or_ids)
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate patient ids")
    if len(ids) < 2:
        raise ManifestError("leave-one-patient-out needs at least 2 patients")
    folds = tuple(Fold(tuple(p for p in ids if p != held), (held,)) for held in ids)
    return FoldPlan(folds)


def _write_provenance(fh, provenance) -> None:
    for k in sorted(provenance or {}):
        fh.write(f"# {k}: {json.dumps(provenance[k], sort_keys=True)}\n")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    @property
    def recall(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)

    def to_csv(self, path, class_names=None, provenance: dict | None = None) -> None:
        names = class_names or [str(i) for i in range(len(self.counts))]
        with open(path, "w", newline="") as fh:
            _write_provenance(fh, provenance)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + list(names))
            for name, row in zip(names, self.counts):
                w.writerow([name] + [int(v) for v in row])


def confusion_matrix(predictions, labels, n_classes: int) -> ConfusionMatrix:
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise InputError("predictions and labels differ in length")
    for arr in (pred, lab):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise InputError(f"class index outside 0..{n_classes - 1}")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (lab, pred), 1)
    return ConfusionMatrix(m)


def auc_one_vs_rest(scores, labels, positive: int) -> float:
    """P(score of a random positive > random negative), ties counted 1/2 (Mann-Whitney)."""
    s = np.asarray(scores, dtype=float)
    pos = np.asarray(labels) == positive
    n_pos = int(pos.sum())
    n_neg = len(s) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"class {positive} needs both positive and negative examples")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def per_class_auc(posteriors, labels) -> np.ndarray:
    """One-vs-rest AUC per class; classes absent from ``labels`` give NaN."""
    p = np.asarray(posteriors)
    out = np.full(p.shape[1], np.nan)
    for c in range(p.shape[1]):
        try:
            out[c] = auc_one_vs_rest(p[:, c], labels, c)
        except UndefinedAUCError:
            pass
    return out


def majority_vote(predictions, posteriors=None) -> int:
    """Most frequent class; ties by larger summed posterior, then lower index."""
    pred = np.asarray(predictions, dtype=np.int64)
    if pred.size == 0:
        raise InputError("empty margin")
    n_classes = int(pred.max()) + 1 if posteriors is None else np.asarray(posteriors).shape[1]
    votes = np.bincount(pred, minlength=n_classes)
    tied = np.flatnonzero(votes == votes.max())
    if len(tied) == 1:
        return int(tied[0])
    if posteriors is not None:
        mass = np.asarray(posteriors, dtype=float).sum(axis=0)[tied]
        tied = tied[mass == mass.max()]
    return int(tied[0])


def margin_votes(predictions, posteriors, margin_index) -> np.ndarray:
    margin_index = np.asarray(margin_index)
    n = int(margin_index.max()) + 1
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        sel = margin_index == i
        out[i] = majority_vote(predictions[sel], posteriors[sel])
    return out


@dataclass
class LopoResult:
    posteriors: np.ndarray
    fold_of_point: np.ndarray
    fold_accuracy: list[float]
    kind: str

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.posteriors, axis=1)


def lopo_predict(kind, x, labels, point_patients, n_classes, hyperparams=None, seed=0,
                 plan: FoldPlan | None = None, train_mask=None, on_fold=None) -> LopoResult:
    """Out-of-fold posteriors for every point.

    ``train_mask`` restricts which points may be used for training (e.g. after
    pruning); test points are never filtered.
    """
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    pp = np.asarray(point_patients, dtype=object)
    plan = plan or lopo_splits(list(dict.fromkeys(pp.tolist())))
    post = np.full((len(x), n_classes), np.nan)
    fold_of = np.full(len(x), -1, dtype=np.int64)
    accs = []
    for fi, (tr, te) in enumerate(plan.masks(pp)):
        if np.any(tr & te):
            raise AssertionError("patient leakage between train and test")
        if train_mask is not None:
            tr = tr & np.asarray(train_mask, dtype=bool)
        if not te.any():
            continue
        model = models.train(kind, x[tr], labels[tr], hyperparams, seed=seed + fi,
                             n_classes=n_classes, groups=pp[tr])
        if on_fold is not None:
            on_fold(fi, model, tr, te)
        post[te] = models.predict_proba(model, x[te])
        fold_of[te] = fi
        accs.append(float(np.mean(np.argmax(post[te], axis=1) == labels[te])))
    if np.isnan(post).any():
        raise AssertionError("some points were never tested")
    return LopoResult(post, fold_of, accs, kind)


def lopo_metrics(result: LopoResult, labels) -> models.ModelMetrics:
    labels = np.asarray(labels)
    acc = float(np.mean(result.predictions == labels))
    auc = per_class_auc(result.posteriors, labels)
    return models.ModelMetrics(acc, auc[np.isfinite(auc)])


def confidence_histogram(cs, labels, n_classes: int, bins: int = 20):
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.zeros((n_classes, bins), dtype=np.int64)
    for c in range(n_classes):
        counts[c], _ = np.histogram(np.asarray(cs)[np.asarray(labels) == c], bins=edges)
    return edges, counts


def write_confidence_histogram(path, edges, counts, class_names, provenance: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        _write_provenance(fh, provenance)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi"] + list(class_names))
        for b in range(len(edges) - 1):
            w.writerow([f"{edges[b]:.4f}", f"{edges[b + 1]:.4f}"] + [int(v) for v in counts[:, b]])


@dataclass
class RescoringResult:
    group: str
    margin_ids: list[str]
    relabeled: list[str]
    accuracy_before: float
    accuracy_after: float
    n_points: int

    @property
    def delta(self) -> float:
        return self.accuracy_after - self.accuracy_before

    def to_dict(self) -> dict:
        return {"group": self.group, "n_margins": len(self.margin_ids), "margin_ids": self.margin_ids,
                "relabeled": self.relabeled, "n_points": self.n_points,
                "accuracy_before": self.accuracy_before, "accuracy_after": self.accuracy_after}


def rescoring_study(manifest, statuses: dict, corruption_log, predictions, merge_map=None,
                    policy: str = "oracle", reliability: float = 1.0, seed: int = 0) -> dict:
    """Simulated blinded re-scoring of issue and control margins.

    ``statuses`` maps margin id to issue/control/indeterminate. ``predictions``
    are point predictions in the (possibly merged) evaluation scheme and
    ``merge_map`` maps original class indices into that scheme. The relabeler
    consults the corruption log: ``oracle`` always restores the true label,
    ``noisy-oracle`` restores it with probability ``reliability`` and otherwise
    returns the original label.
    """
    if policy not in ("oracle", "noisy-oracle"):
        raise InputError(f"unknown relabel policy {policy!r}")
    r = 1.0 if policy == "oracle" else float(reliability)
    if not 0.0 <= r <= 1.0:
        raise InputError("reliability must lie in [0, 1]")
    cmap = np.arange(manifest.n_classes) if merge_map is None else np.asarray(merge_map)
    truth = {e.margin_id: e.true_label for e in corruption_log.entries}
    pred = np.asarray(predictions)
    out = {}
    for group in ("issue", "control"):
        rng = np.random.default_rng([seed, 0 if group == "issue" else 1])
        ids = [m.margin_id for m in manifest.margins if statuses.get(m.margin_id) == group]
        if not ids:
            warnings.warn(f"no margins in the {group} group", RuntimeWarning, stacklevel=2)
            out[group] = RescoringResult(group, [], [], float("nan"), float("nan"), 0)
            continue
        before_hits = after_hits = total = 0
        relabeled = []
        for mid in ids:
            m = manifest.margin(mid)
            sl = slice(m.first_point, m.first_point + m.n_points)
            new_label = m.label
            if rng.random() < r and mid in truth:
                new_label = truth[mid]
            if new_label != m.label:
                relabeled.append(mid)
            before_hits += int(np.sum(pred[sl] == cmap[m.label]))
            after_hits += int(np.sum(pred[sl] == cmap[new_label]))
            total += m.n_points
        out[group] = RescoringResult(group, ids, relabeled, before_hits / total, after_hits / total, total)
    return out
