import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flimcl import curation, evaluation, sim
from flimcl.errors import InputError, ManifestError, UndefinedAUCError


def pairwise_auc(scores, labels, c):
    pos = [s for s, y in zip(scores, labels) if y == c]
    neg = [s for s, y in zip(scores, labels) if y != c]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_lopo_has_one_fold_per_patient():
    ids = [f"P{i:02d}" for i in range(31)]
    plan = evaluation.lopo_splits(ids)
    assert len(plan) == 31
    for fold, pid in zip(plan, ids):
        assert fold.test_patients == (pid,)
        assert pid not in fold.train_patients
        assert len(fold.train_patients) == 30


def test_lopo_two_patients():
    plan = evaluation.lopo_splits(["a", "b"])
    assert [(f.train_patients, f.test_patients) for f in plan] == [(("b",), ("a",)), (("a",), ("b",))]


def test_lopo_errors():
    with pytest.raises(ManifestError):
        evaluation.lopo_splits(["a", "b", "a"])
    with pytest.raises(ManifestError):
        evaluation.lopo_splits(["a"])


def test_lopo_never_leaks_patients(small_dataset):
    manifest, x = small_dataset
    pp = manifest.point_patient_ids()
    plan = evaluation.lopo_splits(manifest)
    assert len(plan) == len(manifest.patient_ids)
    for tr, te in plan.masks(pp):
        assert not set(pp[tr]) & set(pp[te])
        assert tr.sum() + te.sum() == len(pp)
    seen = []
    res = evaluation.lopo_predict("softmax", x, manifest.point_labels(), pp, manifest.n_classes,
                                  on_fold=lambda fi, m, tr, te: seen.append((set(pp[tr]), set(pp[te]))))
    assert all(not a & b for a, b in seen)
    assert np.all(res.fold_of_point >= 0)


def test_confusion_matrix_hand_example():
    cm = evaluation.confusion_matrix([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    assert cm.accuracy == 0.75
    np.testing.assert_allclose(cm.recall, [0.5, 1.0])


def test_confusion_matrix_trivial_cases():
    y = np.array([0, 1, 2, 2])
    m = evaluation.confusion_matrix(y, y, 3).counts
    np.testing.assert_array_equal(m, np.diag(np.diag(m)))
    m = evaluation.confusion_matrix(np.zeros(4, int), y, 3).counts
    assert m[:, 1:].sum() == 0
    with pytest.raises(InputError):
        evaluation.confusion_matrix([0, 3], [0, 1], 3)


def test_regrouping_preserves_total():
    rng = np.random.default_rng(0)
    y, p = rng.integers(0, 7, 200), rng.integers(0, 7, 200)
    scheme, _ = curation.merge_classes(curation.ClassScheme.identity([str(i) for i in range(7)]), [[0, 1, 2], [5, 6]])
    cm = evaluation.confusion_matrix(scheme(p), scheme(y), scheme.n_classes)
    assert cm.total == evaluation.confusion_matrix(p, y, 7).total == 200


def test_auc_examples():
    assert evaluation.auc_one_vs_rest([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], 1) == pytest.approx(0.75)
    assert evaluation.auc_one_vs_rest([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], 1) == 1.0
    assert evaluation.auc_one_vs_rest([0.3] * 5, [0, 1, 0, 1, 1], 1) == 0.5
    with pytest.raises(UndefinedAUCError):
        evaluation.auc_one_vs_rest([0.1, 0.2], [1, 1], 1)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 30))
def test_auc_matches_pairwise_oracle_and_is_rank_invariant(seed, n):
    rng = np.random.default_rng(seed)
    s = np.round(rng.uniform(size=n), 1)
    y = rng.integers(0, 2, size=n)
    if len(set(y)) < 2:
        y[0], y[-1] = 0, 1
    a = evaluation.auc_one_vs_rest(s, y, 1)
    assert a == pytest.approx(pairwise_auc(s, y, 1), abs=1e-12)
    assert evaluation.auc_one_vs_rest(np.exp(3 * s) - 7, y, 1) == pytest.approx(a, abs=1e-12)


def test_majority_vote_rules():
    assert evaluation.majority_vote([0, 0, 1]) == 0
    post = np.array([[0.7, 0.3], [0.4, 0.6], [0.6, 0.4]])
    assert evaluation.majority_vote([0, 1], np.array([[1.3, 0.0], [0.0, 1.1]])) == 0
    assert evaluation.majority_vote([1, 0], np.array([[0.0, 1.1], [1.3, 0.0]])) == 0
    assert evaluation.majority_vote([1, 0], np.array([[0.5, 0.5], [0.5, 0.5]])) == 0
    assert evaluation.majority_vote([2]) == 2
    assert evaluation.majority_vote([0, 1, 0], post) == 0
    with pytest.raises(InputError):
        evaluation.majority_vote([])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_majority_vote_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 3, size=n)
    post = rng.dirichlet(np.ones(3), size=n)
    perm = rng.permutation(n)
    assert evaluation.majority_vote(pred, post) == evaluation.majority_vote(pred[perm], post[perm])


def rescoring_setup(seed=0):
    cfg = sim.SimConfig(n_patients=4, n_margins=20, points_per_margin=(5, 5), class_names=list("abcd"),
                        class_models=sim.ladder_class_models(4), seed=seed)
    truth = sim.synth_manifest(cfg)
    noisy, log = sim.inject_label_noise(truth, 0.3, seed=seed)
    # predictions that agree with the true labels on every point
    pred = truth.point_labels()
    flipped = set(log.margin_ids())
    statuses = {m.margin_id: "issue" if m.margin_id in flipped else "control" for m in noisy.margins}
    return noisy, log, pred, statuses


def test_oracle_rescoring_helps_issue_group():
    noisy, log, pred, statuses = rescoring_setup()
    res = evaluation.rescoring_study(noisy, statuses, log, pred)
    assert res["issue"].accuracy_before == 0.0
    assert res["issue"].accuracy_after == 1.0
    assert res["control"].delta == 0.0
    assert sorted(res["issue"].relabeled) == sorted(log.margin_ids())


def test_zero_reliability_is_identity():
    noisy, log, pred, statuses = rescoring_setup(1)
    res = evaluation.rescoring_study(noisy, statuses, log, pred, policy="noisy-oracle", reliability=0.0)
    for g in res.values():
        assert g.delta == 0.0
        assert g.relabeled == []


def test_rescoring_empty_group_warns():
    noisy, log, pred, statuses = rescoring_setup(2)
    statuses = {k: "control" for k in statuses}
    with pytest.warns(RuntimeWarning):
        res = evaluation.rescoring_study(noisy, statuses, log, pred)
    assert res["issue"].n_points == 0
    with pytest.raises(InputError):
        evaluation.rescoring_study(noisy, statuses, log, pred, policy="guess")


def test_confidence_histogram_counts_every_point():
    rng = np.random.default_rng(0)
    cs = rng.uniform(size=100)
    y = rng.integers(0, 3, 100)
    edges, counts = evaluation.confidence_histogram(cs, y, 3)
    assert len(edges) == 21
    assert counts.sum() == 100
    np.testing.assert_array_equal(counts.sum(axis=1), np.bincount(y, minlength=3))
