import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flimcl import evaluation, models
from flimcl.errors import InputError, TrainingError
from flimcl.models import mlp, softmax_reg


def blobs(n=60, seed=0, gap=8.0, d=4):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(0, 1, (n, d)), rng.normal(gap, 1, (n, d))])
    y = np.r_[np.zeros(n), np.ones(n)].astype(int)
    return x, y


def numeric_grad(params, x, y, w, l2, h=1e-6):
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up, _ = mlp.loss_and_grad(params, x, y, w, l2)
            p[i] = old - h
            dn, _ = mlp.loss_and_grad(params, x, y, w, l2)
            p[i] = old
            g[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


def gradient_errors(n_nets=20, seed=0):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_nets):
        d, C = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        hidden = tuple(int(v) for v in rng.integers(2, 7, size=int(rng.integers(1, 3))))
        params = mlp.init_params([d, *hidden, C], rng)
        params = [p + 0.1 * rng.standard_normal(p.shape) for p in params]
        x = rng.normal(size=(12, d))
        y = rng.integers(0, C, size=12)
        w = rng.uniform(0.2, 3.0, size=12)
        _, ga = mlp.loss_and_grad(params, x, y, w, 1e-3)
        gn = numeric_grad(params, x, y, w, 1e-3)
        a = np.concatenate([g.ravel() for g in ga])
        b = np.concatenate([g.ravel() for g in gn])
        errs.append(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))
    return np.array(errs)


def test_mlp_gradient_check():
    assert gradient_errors().max() <= 1e-4


def test_softmax_regression_gradient_check():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(15, 3))
    y = rng.integers(0, 3, size=15)
    w = rng.uniform(0.5, 2, size=15)
    theta = rng.normal(size=12)
    _, g = softmax_reg.loss_and_grad(theta.copy(), x, y, w, 3, 1e-2)
    num = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = 1e-6
        num[i] = (softmax_reg.loss_and_grad(theta + e, x, y, w, 3, 1e-2)[0]
                  - softmax_reg.loss_and_grad(theta - e, x, y, w, 3, 1e-2)[0]) / 2e-6
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-8)


def test_weighted_loss_equals_duplication():
    rng = np.random.default_rng(2)
    params = mlp.init_params([3, 5, 3], rng)
    x = rng.normal(size=(10, 3))
    y = np.array([0, 0, 0, 0, 0, 0, 1, 1, 2, 2])
    k = 4
    minority = y > 0
    w = np.where(minority, float(k), 1.0)
    weighted, _ = mlp.loss_and_grad(params, x, y, w)
    xd = np.vstack([x[~minority]] + [x[minority]] * k)
    yd = np.r_[y[~minority], np.tile(y[minority], k)]
    dup, _ = mlp.loss_and_grad(params, xd, yd, np.ones(len(yd)))
    assert weighted == pytest.approx(dup, abs=1e-9)


def test_balanced_weights_equalise_class_mass():
    y = np.array([0, 0, 0, 0, 1, 2, 2])
    w = models.balanced_class_weights(y, 4)[y]
    mass = np.bincount(y, weights=w, minlength=4)
    np.testing.assert_allclose(mass[:3], len(y) / 3)
    assert mass[3] == 0


@pytest.mark.parametrize("kind", models.KINDS)
def test_separable_training_accuracy(kind):
    x, y = blobs()
    m = models.train(kind, x, y, seed=0)
    assert np.mean(models.predict(m, x) == y) == 1.0


@pytest.mark.parametrize("kind", models.KINDS)
def test_training_is_deterministic(kind):
    x, y = blobs(seed=3, gap=1.5)
    a = models.train(kind, x, y, seed=5, groups=np.arange(len(y)) % 6)
    b = models.train(kind, x, y, seed=5, groups=np.arange(len(y)) % 6)
    assert models.to_json(a) == models.to_json(b)


@pytest.mark.parametrize("kind", models.KINDS)
def test_posterior_rows_sum_to_one(kind):
    x, y = blobs(seed=4, gap=1.0)
    m = models.train(kind, x, y, seed=0)
    rng = np.random.default_rng(0)
    q = rng.normal(0, 5, size=(50, 4))
    p = models.predict_proba(m, np.vstack([q, q[:5]]))
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    # BLAS may block rows differently by position; only rounding may differ
    np.testing.assert_allclose(p[:5], p[50:], rtol=0, atol=1e-12)


def test_model_errors():
    x, y = blobs()
    with pytest.raises(TrainingError):
        models.train("mlp", x, np.zeros(len(x), dtype=int))
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(InputError):
        models.train("softmax", bad, y)
    m = models.train("softmax", x, y)
    with pytest.raises(InputError):
        models.predict_proba(m, x[:, :3])
    with pytest.raises(InputError):
        models.train("svm", x, y)


def test_standardisation_uses_training_rows_only():
    x, y = blobs()
    m = models.train("softmax", x[:80], y[:80])
    np.testing.assert_allclose(m.scaler.mean, x[:80].mean(axis=0))
    np.testing.assert_allclose(m.scaler.sd, x[:80].std(axis=0))


def test_class_permutation_permutes_columns():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(90, 3))
    y = np.argmax(x + 0.5 * rng.normal(size=(90, 3)), axis=1)
    perm = np.array([2, 0, 1])
    a = models.predict_proba(models.train("softmax", x, y), x)
    b = models.predict_proba(models.train("softmax", x, perm[y]), x)
    np.testing.assert_allclose(b[:, perm], a, atol=1e-4)


def test_shuffled_labels_give_chance_accuracy(small_dataset):
    manifest, x = small_dataset
    rng = np.random.default_rng(0)
    y = rng.permutation(manifest.point_labels())
    res = evaluation.lopo_predict("softmax", x, y, manifest.point_patient_ids(), 4)
    assert abs(np.mean(res.predictions == y) - 0.25) <= 0.10


def test_json_round_trip():
    x, y = blobs(gap=2.0)
    for kind in models.KINDS:
        m = models.train(kind, x, y, seed=1)
        m2 = models.from_json(models.to_json(m))
        np.testing.assert_array_equal(models.predict_proba(m, x), models.predict_proba(m2, x))


def test_select_baseline_rules():
    aucs = np.array([0.8, 0.8])
    assert models.select_baseline({"A": (0.50, [0.60]), "B": (0.44, [0.90])}) == "B"
    table = {"softmax": 0.2545, "random_forest": 0.2478, "knn": 0.2270, "mlp": 0.4392, "boost": 0.2747}
    assert models.select_baseline({k: (v, aucs) for k, v in table.items()}) == "mlp"
    assert models.select_baseline({"only": (0.3, aucs)}) == "only"
    # equal score: higher accuracy wins, then the name
    assert models.select_baseline({"x": (0.6, [0.8]), "y": (0.8, [0.6])}) == "y"
    assert models.select_baseline({"b": (0.6, [0.8]), "a": (0.6, [0.8])}) == "a"
    with pytest.raises(InputError):
        models.select_baseline({})


@settings(max_examples=30, deadline=None)
@given(acc=st.lists(st.floats(0, 1), min_size=1, max_size=5), auc=st.floats(0, 1))
def test_selection_score_formula(acc, auc):
    metrics = {f"m{i}": models.ModelMetrics(a, np.array([auc, 1 - auc])) for i, a in enumerate(acc)}
    best = models.select_baseline(metrics)
    assert metrics[best].selection_score == max(m.selection_score for m in metrics.values())
    assert metrics[best].selection_score == pytest.approx(0.5 * (metrics[best].accuracy + 0.5))
