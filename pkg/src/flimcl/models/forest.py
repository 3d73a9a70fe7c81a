"""Random forest of class-weighted Gini trees; the split scan runs in the kernel backend."""
from __future__ import annotations

import numpy as np

from .. import _backend


def build_tree(x, y, w, n_classes, rng, max_depth=12, min_leaf=5, max_features=None):
    n, d = x.shape
    k = max_features or max(1, int(np.sqrt(d)))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(samples):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        dist = np.bincount(y[samples], weights=w[samples], minlength=n_classes)
        value.append(dist / dist.sum())
        return len(feature) - 1

    root = new_node(np.arange(n))
    stack = [(root, np.arange(n, dtype=np.int64), 0)]
    while stack:
        node, samples, depth = stack.pop()
        if depth >= max_depth or len(samples) < 2 * min_leaf or value[node].max() == 1.0:
            continue
        feats = rng.choice(d, size=min(k, d), replace=False).astype(np.int64)
        f, thr, _ = _backend.best_split(x, y, w, samples, feats, n_classes, min_leaf)
        if f < 0:
            continue
        mask = x[samples, f] <= thr
        ls, rs = samples[mask], samples[~mask]
        feature[node] = f
        threshold[node] = thr
        left[node] = new_node(ls)
        right[node] = new_node(rs)
        stack.append((right[node], rs, depth + 1))
        stack.append((left[node], ls, depth + 1))
    return {
        "feature": np.asarray(feature, dtype=np.int64),
        "threshold": np.asarray(threshold, dtype=float),
        "left": np.asarray(left, dtype=np.int64),
        "right": np.asarray(right, dtype=np.int64),
        "value": np.asarray(value, dtype=float),
    }


def fit(x, y, w, n_classes, rng, n_trees=50, max_depth=12, min_leaf=5, max_features=None):
    trees = []
    n = len(x)
    for _ in range(n_trees):
        boot = rng.integers(0, n, size=n)
        xb = np.ascontiguousarray(x[boot])
        trees.append(build_tree(xb, y[boot], w[boot], n_classes, rng, max_depth, min_leaf, max_features))
    return pack(trees)


def pack(trees) -> dict:
    """Concatenate per-tree arrays; ``offsets[i]`` is the first node of tree ``i``."""
    sizes = [len(t["feature"]) for t in trees]
    return {
        "offsets": np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64),
        **{key: np.concatenate([t[key] for t in trees]) for key in ("feature", "threshold", "left", "right", "value")},
    }


def unpack(params) -> list[dict]:
    off = params["offsets"]
    return [{key: params[key][off[i]:off[i + 1]] for key in ("feature", "threshold", "left", "right", "value")}
            for i in range(len(off) - 1)]


def predict(params, x):
    x = np.ascontiguousarray(x, dtype=float)
    trees = unpack(params)
    acc = np.zeros((len(x), params["value"].shape[1]))
    for t in trees:
        leaves = _backend.tree_apply(x, np.ascontiguousarray(t["feature"]), np.ascontiguousarray(t["threshold"]),
                                     np.ascontiguousarray(t["left"]), np.ascontiguousarray(t["right"]))
        acc += t["value"][leaves]
    acc /= len(trees)
    return acc / acc.sum(axis=1, keepdims=True)
