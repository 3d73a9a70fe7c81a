import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flimcl import attribution, models
from flimcl.errors import InputError


def nonlinear(x):
    # two outputs with interactions, saturation and one ignored column (index 5)
    a = np.tanh(x[:, 0] * x[:, 1]) + 0.5 * x[:, 2] ** 2 - np.abs(x[:, 3])
    b = 1.0 / (1.0 + np.exp(-(x[:, 4] + x[:, 0])))
    return np.c_[a, b]


@pytest.fixture(scope="module")
def mlp_model():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 6))
    y = (x[:, 0] + x[:, 1] * x[:, 2] > 0).astype(int) + (x[:, 3] > 1)
    return models.train("mlp", x, y, seed=0), x


@pytest.mark.parametrize("seed", range(5))
def test_monte_carlo_matches_exact_enumeration(seed, mlp_model):
    model, x = mlp_model
    rng = np.random.default_rng(seed)
    bg = x[rng.choice(len(x), 20, replace=False)]
    inst = x[rng.integers(len(x))]
    exact = attribution.exact_shapley(model, bg, inst)
    est = attribution.shapley_values(model, bg, inst, n_permutations=500, seed=seed)
    assert np.abs(est.values - exact).max() <= 0.05


def test_monte_carlo_matches_exact_on_callable():
    rng = np.random.default_rng(1)
    bg = rng.normal(size=(30, 6))
    inst = rng.normal(size=6)
    exact = attribution.exact_shapley(nonlinear, bg, inst)
    est = attribution.shapley_values(nonlinear, bg, inst, n_permutations=500, seed=3)
    assert np.abs(est.values - exact).max() <= 0.05


def test_linear_model_closed_form():
    rng = np.random.default_rng(2)
    w = np.array([1.5, -2.0, 0.0, 0.3])
    bg = rng.normal(size=(50, 4))
    inst = rng.normal(size=4)
    est = attribution.shapley_values(lambda z: z @ w, bg, inst, n_permutations=10, seed=0)
    np.testing.assert_allclose(est.values[:, 0], w * (inst - bg.mean(axis=0)), atol=1e-12)
    assert est.values[2, 0] == 0.0


def test_null_player_and_symmetry_in_exact_enumeration():
    rng = np.random.default_rng(3)
    bg = rng.normal(size=(15, 5))
    inst = rng.normal(size=5)
    inst[1] = inst[0]
    bg[:, 1] = bg[:, 0]

    def f(z):
        return np.sin(z[:, 0]) * np.sin(z[:, 1]) + z[:, 2] * z[:, 3]

    phi = attribution.exact_shapley(f, bg, inst)[:, 0]
    assert phi[4] == 0.0
    assert phi[0] == pytest.approx(phi[1], abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n_perm=st.integers(2, 40))
def test_efficiency_over_full_background(seed, n_perm):
    rng = np.random.default_rng(seed)
    bg = rng.normal(size=(12, 6))
    inst = rng.normal(size=6)
    est = attribution.shapley_values(nonlinear, bg, inst, n_permutations=n_perm, seed=seed)
    np.testing.assert_allclose(est.values.sum(axis=0), est.prediction - est.baseline, atol=1e-10)


def test_efficiency_with_background_draws_within_three_standard_errors():
    rng = np.random.default_rng(4)
    bg = rng.normal(size=(200, 6))
    inst = rng.normal(size=6)
    n_perm, draws = 300, 4
    est = attribution.shapley_values(nonlinear, bg, inst, n_permutations=n_perm, seed=1, background_draws=draws)
    # each permutation's sum is f(x) minus the mean of f over its drawn rows
    se = nonlinear(bg).std(axis=0, ddof=1) / np.sqrt(n_perm * draws)
    gap = np.abs(est.values.sum(axis=0) - (est.prediction - est.baseline))
    assert np.all(gap <= 3 * se)


def test_shapley_deterministic_and_errors(mlp_model):
    model, x = mlp_model
    a = attribution.shapley_values(model, x[:10], x[50], n_permutations=8, seed=9)
    b = attribution.shapley_values(model, x[:10], x[50], n_permutations=8, seed=9)
    np.testing.assert_array_equal(a.values, b.values)
    with pytest.raises(InputError):
        attribution.shapley_values(model, x[:10, :5], x[50], n_permutations=8)
    with pytest.raises(InputError):
        attribution.shapley_values(model, x[:0], x[50])
    with pytest.raises(InputError):
        attribution.shapley_values(model, x[:10], x[50], n_permutations=0)
    with pytest.raises(InputError):
        attribution.shapley_values(model, x[:10], x[50], scale="odds")


def test_log_odds_scale_on_linear_logits():
    rng = np.random.default_rng(5)
    bg = rng.normal(size=(40, 3))
    inst = rng.normal(size=3)
    w = np.array([0.5, -1.0, 2.0])

    def sigmoid(z):
        return 1.0 / (1.0 + np.exp(-(z @ w)))

    est = attribution.shapley_values(sigmoid, bg, inst, n_permutations=5, scale="log-odds")
    np.testing.assert_allclose(est.values[:, 0], w * (inst - bg.mean(axis=0)), atol=1e-9)


def test_stratified_background_covers_classes():
    labels = np.repeat([0, 1, 2], [500, 300, 5])
    idx = attribution.stratified_background(np.zeros((805, 1)), labels, n=100, seed=0)
    assert len(idx) == 100
    counts = np.bincount(labels[idx], minlength=3)
    assert counts.min() >= 1
    assert abs(counts[0] - 62) <= 1 and abs(counts[1] - 37) <= 1


def redundant_setup():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(400, 4))
    x[:, 1] = x[:, 0]
    y = (x[:, 0] > 0).astype(int)

    def model(z):
        s = 0.5 * (z[:, 0] + z[:, 1])
        p = 1.0 / (1.0 + np.exp(-20 * s))
        return np.c_[1 - p, p]

    return model, x, y


def test_permutation_importance_redundancy_and_null_feature():
    model, x, y = redundant_setup()
    single, _ = attribution.permutation_importance(model, x, y, n_repeats=5, seed=0)
    joint, _ = attribution.permutation_importance(model, x, y, n_repeats=5, seed=0, groups=[[0, 1]])
    assert single[0] < joint[0]
    assert single[1] < joint[0]
    assert single[2] == 0.0 and single[3] == 0.0


def test_permutation_importance_deterministic_and_metric_check():
    model, x, y = redundant_setup()
    a = attribution.permutation_importance(model, x, y, "mean_auc", n_repeats=3, seed=2)
    b = attribution.permutation_importance(model, x, y, "mean_auc", n_repeats=3, seed=2)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(InputError):
        attribution.permutation_importance(model, x, y, "f1")


def test_explain_outputs(mlp_model, tmp_path):
    model, x = mlp_model
    labels = models.predict(model, x)
    res = attribution.explain(model, x, labels, [f"f{i}" for i in range(6)], ["a", "b", "c"],
                              per_class=3, background_size=20, n_permutations=8, seed=1)
    assert res.values.shape[1:] == (6, 3)
    ranks = res.ranking()
    for c in range(3):
        assert sorted(ranks[c]) == list(range(1, 7))
    path = tmp_path / "attr.csv"
    res.to_csv(path, provenance={"seed": 1})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed: 1"
    assert lines[1] == "class,feature,mean_abs_attribution,rank"
    assert len(lines) == 2 + 3 * 6
    doc = json.loads(res.instances_json(top_k=2))
    assert doc["scale"] == "probability"
    assert len(doc["instances"]) <= 6
    assert set(doc["instances"][0]["attribution"]) == {f"f{i}" for i in range(6)}
