"""Confident-learning curation: confidence scores, confident joint, flags, merging.

Thresholds average each class's self-confidence over the points observed with
that label. A point is low-confidence (LC) when its argmax prediction differs
from its observed label and its confidence reaches the predicted class's
threshold, i.e. when it lands off the diagonal of the confident joint.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import InputError, PruningError, ThresholdUndefinedError

ISSUE_THRESHOLD = 0.70
CONTROL_THRESHOLD = 0.30


def _check_posteriors(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] == 0:
        raise InputError("posterior matrix must be a nonempty 2-D array")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InputError("posteriors must be finite and nonnegative")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise InputError("posterior rows must sum to 1")
    return p


def _check_labels(labels, n, n_classes) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise InputError("labels and posteriors differ in length")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InputError("label outside the posterior's class range")
    return y


def confidence_scores(posteriors) -> np.ndarray:
    return _check_posteriors(posteriors).max(axis=1)


def margin_confidence(cs, margin_index, n_margins: int | None = None) -> np.ndarray:
    """Mean confidence per margin; ``margin_index[k]`` is the margin of point k."""
    cs = np.asarray(cs, dtype=float)
    mi = np.asarray(margin_index, dtype=np.int64)
    if cs.shape != mi.shape:
        raise InputError("confidence scores and margin grouping differ in length")
    n = int(mi.max()) + 1 if n_margins is None else n_margins
    counts = np.bincount(mi, minlength=n)
    if np.any(counts == 0):
        raise InputError(f"empty margin(s): {np.flatnonzero(counts == 0).tolist()}")
    return np.bincount(mi, weights=cs, minlength=n) / counts


def class_thresholds(posteriors, labels, mode: str = "self", class_names=None) -> np.ndarray:
    """Per-class threshold tau_j.

    ``mode="self"`` averages p[k, j] over points labelled j; ``mode="all"``
    averages it over every point.
    """
    p = _check_posteriors(posteriors)
    y = _check_labels(labels, len(p), p.shape[1])
    if mode == "all":
        return p.mean(axis=0)
    if mode != "self":
        raise InputError(f"unknown threshold mode {mode!r}")
    tau = np.empty(p.shape[1])
    for j in range(p.shape[1]):
        sel = y == j
        if not sel.any():
            raise ThresholdUndefinedError(j, class_names[j] if class_names else None)
        tau[j] = p[sel, j].mean()
    return tau


@dataclass(frozen=True)
class ConfidentJoint:
    counts: np.ndarray
    thresholds: np.ndarray

    def to_csv(self, path, class_names=None, provenance: dict | None = None) -> None:
        import csv

        names = class_names or [str(i) for i in range(len(self.counts))]
        with open(path, "w", newline="") as fh:
            for k in sorted(provenance or {}):
                fh.write(f"# {k}: {json.dumps(provenance[k], sort_keys=True)}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["observed\\predicted"] + list(names))
            for name, row in zip(names, self.counts):
                w.writerow([name] + [int(v) for v in row])


def _joint_and_flags(p, y, tau):
    pred = np.argmax(p, axis=1).astype(np.int64)
    cs = np.ascontiguousarray(p.max(axis=1))
    tau = np.ascontiguousarray(tau, dtype=float)
    if tau.shape != (p.shape[1],):
        raise InputError("one threshold per class required")
    return _backend.confident_joint_counts(np.ascontiguousarray(y), pred, cs, tau, p.shape[1])


def confident_joint(posteriors, labels, thresholds) -> ConfidentJoint:
    p = _check_posteriors(posteriors)
    y = _check_labels(labels, len(p), p.shape[1])
    counts, _ = _joint_and_flags(p, y, thresholds)
    return ConfidentJoint(counts, np.asarray(thresholds, dtype=float).copy())


def flag_low_confidence(posteriors, labels, thresholds) -> np.ndarray:
    p = _check_posteriors(posteriors)
    y = _check_labels(labels, len(p), p.shape[1])
    _, flags = _joint_and_flags(p, y, thresholds)
    return flags.astype(bool)


def flag_label_issues(lc_flags, margin_index, n_margins: int | None = None,
                      issue: float = ISSUE_THRESHOLD, control: float = CONTROL_THRESHOLD):
    """Per-margin LC fraction and status: issue if > ``issue``, control if < ``control``."""
    if not 0.0 <= control < issue <= 1.0:
        raise InputError("need 0 <= control < issue <= 1")
    frac = margin_confidence(np.asarray(lc_flags, dtype=float), margin_index, n_margins)
    status = np.where(frac > issue, "issue", np.where(frac < control, "control", "indeterminate"))
    return frac, status.tolist()


@dataclass
class PruneResult:
    keep: np.ndarray
    removed: int

    @property
    def kept(self) -> int:
        return int(self.keep.sum())


def prune_training_set(train_mask, lc_flags, labels=None, n_classes=None, class_names=None) -> PruneResult:
    """Drop flagged training points; points outside ``train_mask`` are never touched."""
    train_mask = np.asarray(train_mask, dtype=bool)
    flags = np.asarray(lc_flags, dtype=bool)
    if flags.shape != train_mask.shape:
        raise InputError("flags and split mask differ in length")
    keep = train_mask & ~flags
    if labels is not None:
        labels = np.asarray(labels)
        n_classes = n_classes or int(labels.max()) + 1
        for c in range(n_classes):
            if np.any(train_mask & (labels == c)) and not np.any(keep & (labels == c)):
                name = class_names[c] if class_names else c
                raise PruningError(f"pruning would remove every training point of class {name!r}")
    return PruneResult(keep=keep, removed=int((train_mask & flags).sum()))


# ---------------------------------------------------------------------------
# class schemes


@dataclass(frozen=True)
class ClassScheme:
    """Ordered class names plus the map from original class indices."""

    names: tuple[str, ...]
    mapping: tuple[int, ...]

    def __post_init__(self):
        m = self.mapping
        if any(b < a for a, b in zip(m, m[1:])):
            raise InputError("class map must preserve order")
        if sorted(set(m)) != list(range(len(self.names))):
            raise InputError("class map must be onto 0..C'-1 without gaps")

    @classmethod
    def identity(cls, names) -> "ClassScheme":
        return cls(tuple(names), tuple(range(len(names))))

    @property
    def n_classes(self) -> int:
        return len(self.names)

    def __call__(self, original_labels) -> np.ndarray:
        return np.asarray(self.mapping, dtype=np.int64)[np.asarray(original_labels, dtype=np.int64)]


def _default_merged_name(names):
    if len(names) == 1:
        return names[0]
    return names[-1] if names[-1] in ("low", "high") else "/".join(names)


def merge_classes(scheme: ClassScheme, groups, names=None):
    """Merge groups of adjacent classes of the current scheme.

    ``groups`` is a list of index lists (or class names) in the current
    scheme; each must be contiguous. ``names`` optionally names the merged
    classes. Returns ``(new_scheme, step_map)`` where ``step_map[i]`` is the new
    index of current class ``i``.
    """
    C = scheme.n_classes
    idx_groups = []
    for g in groups:
        gi = sorted(scheme.names.index(v) if isinstance(v, str) else int(v) for v in g)
        if not gi:
            continue
        if any(i < 0 or i >= C for i in gi):
            raise InputError(f"class index out of range in {g}")
        if gi != list(range(gi[0], gi[-1] + 1)):
            raise InputError(f"merge group {list(g)} is not contiguous")
        idx_groups.append(gi)
    used = [i for g in idx_groups for i in g]
    if len(used) != len(set(used)):
        raise InputError("merge groups overlap")
    if names is not None and len(names) != len(idx_groups):
        raise InputError("one name per merge group required")
    owner = {}
    for gi_n, g in enumerate(idx_groups):
        for i in g:
            owner[i] = gi_n
    step_map = []
    new_names = []
    prev_owner = None
    for i in range(C):
        o = owner.get(i)
        if o is not None and o == prev_owner:
            step_map.append(len(new_names) - 1)
            continue
        if o is None:
            new_names.append(scheme.names[i])
        else:
            g = idx_groups[o]
            new_names.append(names[o] if names is not None else _default_merged_name([scheme.names[j] for j in g]))
        step_map.append(len(new_names) - 1)
        prev_owner = o
    mapping = tuple(step_map[c] for c in scheme.mapping)
    return ClassScheme(tuple(new_names), mapping), np.asarray(step_map, dtype=np.int64)


def regroup_predictions(predictions, labels, merge_map):
    """Push predictions and labels through a class map (no retraining)."""
    mm = np.asarray(merge_map, dtype=np.int64)
    return mm[np.asarray(predictions, dtype=np.int64)], mm[np.asarray(labels, dtype=np.int64)]


def merge_candidate(joint: np.ndarray, cs, labels, preds=None):
    """Adjacent pair (c, c+1) maximising size-normalised symmetric confident confusion.

    Ties go to the pair with lower mean confidence. Returns ``(c, score)``.
    """
    joint = np.asarray(joint, dtype=float)
    labels = np.asarray(labels)
    cs = np.asarray(cs, dtype=float)
    C = len(joint)
    n_c = np.bincount(labels, minlength=C).astype(float)
    best = None
    for c in range(C - 1):
        a = joint[c, c + 1] / n_c[c] if n_c[c] else 0.0
        b = joint[c + 1, c] / n_c[c + 1] if n_c[c + 1] else 0.0
        sel = (labels == c) | (labels == c + 1)
        mean_cs = float(cs[sel].mean()) if sel.any() else 1.0
        key = (-(a + b), mean_cs, c)
        if best is None or key < best[0]:
            best = (key, c, a + b)
    return best[1], best[2]


@dataclass
class RefinementStep:
    scheme: ClassScheme
    accuracy: float
    lc_fraction: float
    mean_cs: list[float]
    thresholds: list[float]
    joint: list[list[int]]
    merged: list[int] | None = None
    accepted: bool = True

    def to_dict(self) -> dict:
        return {
            "classes": list(self.scheme.names), "mapping": list(self.scheme.mapping),
            "accuracy": self.accuracy, "lc_fraction": self.lc_fraction,
            "mean_cs": self.mean_cs, "thresholds": self.thresholds, "confident_joint": self.joint,
            "merged": self.merged, "accepted": self.accepted,
        }


@dataclass
class CurationReport:
    point_ids: list[int]
    cs: np.ndarray
    lc: np.ndarray
    margin_ids: list[str]
    mcs: np.ndarray
    lc_fraction: np.ndarray
    status: list[str]
    joint: ConfidentJoint
    class_names: list[str]
    history: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": "flimcl-curation/1",
            "provenance": self.provenance,
            "class_names": self.class_names,
            "thresholds": [float(v) for v in self.joint.thresholds],
            "confident_joint": self.joint.counts.tolist(),
            "points": {str(pid): {"cs": float(c), "lc": bool(f)} for pid, c, f in zip(self.point_ids, self.cs, self.lc)},
            "margins": {mid: {"mcs": float(a), "lc_fraction": float(b), "status": s}
                        for mid, a, b, s in zip(self.margin_ids, self.mcs, self.lc_fraction, self.status)},
            "scheme_history": self.history,
            "metrics": self.metrics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @property
    def statuses(self) -> dict:
        return dict(zip(self.margin_ids, self.status))


def curate(posteriors, labels, margin_index, margin_ids, point_ids, class_names,
           threshold_mode: str = "self", issue: float = ISSUE_THRESHOLD,
           control: float = CONTROL_THRESHOLD) -> CurationReport:
    """Run the full scoring pass over one posterior matrix."""
    p = _check_posteriors(posteriors)
    y = _check_labels(labels, len(p), p.shape[1])
    cs = p.max(axis=1)
    tau = class_thresholds(p, y, threshold_mode, class_names)
    joint = confident_joint(p, y, tau)
    lc = flag_low_confidence(p, y, tau)
    mcs = margin_confidence(cs, margin_index, len(margin_ids))
    frac, status = flag_label_issues(lc, margin_index, len(margin_ids), issue, control)
    return CurationReport(list(point_ids), cs, lc, list(margin_ids), mcs, frac, status, joint, list(class_names))


@dataclass
class RefinementResult:
    steps: list[RefinementStep]
    scheme: ClassScheme
    posteriors: np.ndarray
    labels: np.ndarray
    lc: np.ndarray
    pruned_posteriors: np.ndarray | None
    accuracy_before_prune: float
    accuracy_after_prune: float | None
    model: object = None

    @property
    def history(self) -> list[dict]:
        return [s.to_dict() for s in self.steps]

    @property
    def pruning_gain(self) -> float | None:
        if self.accuracy_after_prune is None:
            return None
        return self.accuracy_after_prune - self.accuracy_before_prune


def _score_scheme(kind, x, labels, patients, scheme, hyperparams, seed, threshold_mode, plan):
    from . import evaluation

    y = scheme(labels)
    res = evaluation.lopo_predict(kind, x, y, patients, scheme.n_classes, hyperparams, seed, plan)
    p = res.posteriors
    tau = class_thresholds(p, y, threshold_mode, list(scheme.names))
    counts, flags = _joint_and_flags(p, y, tau)
    cs = p.max(axis=1)
    acc = float(np.mean(res.predictions == y))
    mean_cs = [float(cs[y == c].mean()) for c in range(scheme.n_classes)]
    step = RefinementStep(scheme, acc, float(flags.mean()), mean_cs, tau.tolist(), counts.tolist())
    return step, p, y, cs, counts, flags.astype(bool)


def refine_iteratively(x, labels, point_patients, scheme: ClassScheme, kind: str,
                       hyperparams=None, seed: int = 0, epsilon: float = 0.005,
                       schedule=None, prune: bool = True, threshold_mode: str = "self",
                       on_step=None) -> RefinementResult:
    """Merge adjacent classes while LOPO accuracy improves, then prune and retrain.

    ``labels`` are original class indices; ``scheme`` maps them into the
    starting scheme. Without ``schedule`` each step merges the adjacent pair
    with the largest size-normalised symmetric confident confusion; a merge
    whose accuracy gain is below ``epsilon`` is rejected and ends the search.
    With ``schedule`` (a list of merge-group lists, optionally paired with new
    names) those merges are applied in order and all are kept.
    """
    from . import evaluation, models

    labels = np.asarray(labels, dtype=np.int64)
    patients = np.asarray(point_patients, dtype=object)
    if len(np.unique(scheme(labels))) < 2:
        raise InputError("refinement needs at least two observed classes")
    plan = evaluation.lopo_splits(list(dict.fromkeys(patients.tolist())))
    args = (kind, x, labels, patients)
    step, p, y, cs, counts, flags = _score_scheme(*args, scheme, hyperparams, seed, threshold_mode, plan)
    steps = [step]
    if on_step:
        on_step(step)
    current = (scheme, p, y, flags)
    queue = list(schedule) if schedule is not None else None
    while current[0].n_classes > 2:
        cur_scheme = current[0]
        if queue is not None:
            if not queue:
                break
            item = queue.pop(0)
            groups, names = (item["groups"], item.get("names")) if isinstance(item, dict) else (item, None)
            new_scheme, _ = merge_classes(cur_scheme, groups, names)
            merged = None
        else:
            c, _ = merge_candidate(counts, cs, y)
            new_scheme, _ = merge_classes(cur_scheme, [[c, c + 1]])
            merged = [c, c + 1]
        step, p2, y2, cs2, counts2, flags2 = _score_scheme(*args, new_scheme, hyperparams, seed, threshold_mode, plan)
        step.merged = merged
        gain = step.accuracy - steps[-1].accuracy
        if queue is None and gain < epsilon:
            step.accepted = False
            steps.append(step)
            if on_step:
                on_step(step)
            break
        steps.append(step)
        if on_step:
            on_step(step)
        current = (new_scheme, p2, y2, flags2)
        cs, counts = cs2, counts2

    final_scheme, p, y, flags = current
    acc_before = float(np.mean(np.argmax(p, axis=1) == y))
    pruned = None
    acc_after = None
    model = None
    if prune:
        kept = prune_training_set(np.ones(len(y), dtype=bool), flags, y, final_scheme.n_classes,
                                        list(final_scheme.names))
        res = evaluation.lopo_predict(kind, x, y, patients, final_scheme.n_classes, hyperparams, seed,
                                      plan, train_mask=kept.keep)
        pruned = res.posteriors
        acc_after = float(np.mean(res.predictions == y))
        model = models.train(kind, x[kept.keep], y[kept.keep], hyperparams, seed,
                             n_classes=final_scheme.n_classes, groups=patients[kept.keep])
    return RefinementResult(steps, final_scheme, p, y, flags, pruned, acc_before, acc_after, model)
