"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--n 5000]

Times each kernel on demo-sized inputs, then a full random-forest fit with
each backend swapped in, and checks that both backends return the same
answers.
"""
import argparse
import timeit
from contextlib import contextmanager

import numpy as np

from flimcl import _backend, models
from flimcl import _kernels_py as py
from flimcl.models import forest


@contextmanager
def use_backend(k):
    saved = (_backend.best_split, _backend.tree_apply, _backend.confident_joint_counts)
    _backend.best_split, _backend.tree_apply, _backend.confident_joint_counts = \
        k.best_split, k.tree_apply, k.confident_joint_counts
    try:
        yield
    finally:
        _backend.best_split, _backend.tree_apply, _backend.confident_joint_counts = saved


def inputs(n, d, C, seed=0):
    rng = np.random.default_rng(seed)
    X = np.ascontiguousarray(rng.normal(size=(n, d)))
    y = rng.integers(0, C, size=n).astype(np.int64)
    w = rng.uniform(0.5, 2.0, size=n)
    return X, y, w


def agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(np.array_equal(u, v) for u, v in zip(a, b))
    return np.array_equal(a, b)


def best_of(fn, repeat, number=1):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=5000, help="points per kernel call")
    args = ap.parse_args(argv)

    if _backend.BACKEND != "cython":
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1
    cy = _backend.kernels
    n, d, C = args.n, 38, 7
    X, y, w = inputs(n, d, C)
    samples = np.arange(n, dtype=np.int64)
    feats = np.arange(0, d, 6, dtype=np.int64)  # sqrt(d)-sized feature draw

    model = models.train("random_forest", X[:2000], y[:2000] % 3, {"n_trees": 5}, seed=0)
    tree = forest.unpack(model.params)[0]
    tree_args = tuple(np.ascontiguousarray(tree[k]) for k in ("feature", "threshold", "left", "right"))

    p = np.random.default_rng(1).dirichlet(np.ones(C), size=n)
    pred = np.argmax(p, axis=1).astype(np.int64)
    cs = np.ascontiguousarray(p.max(axis=1))
    tau = np.full(C, 0.3)

    cases = {
        "best_split": lambda k: k.best_split(X, y, w, samples, feats, C, 5),
        "tree_apply": lambda k: k.tree_apply(X, *tree_args),
        "confident_joint_counts": lambda k: k.confident_joint_counts(y, pred, cs, tau, C),
    }
    print(f"{'kernel':26s} {'python (ms)':>12s} {'cython (ms)':>12s} {'speed-up':>9s}  same result")
    for name, call in cases.items():
        a, b = call(py), call(cy)
        same = agree(a, b)
        t_py = best_of(lambda: call(py), args.repeat)
        t_cy = best_of(lambda: call(cy), args.repeat)
        print(f"{name:26s} {1e3 * t_py:12.3f} {1e3 * t_cy:12.3f} {t_py / t_cy:8.1f}x  {same}")

    fit_x, fit_y = X[:3000], y[:3000]
    hp = {"n_trees": 20}
    times = {}
    outputs = {}
    for label, k in (("python", py), ("cython", cy)):
        with use_backend(k):
            times[label] = best_of(lambda: models.train("random_forest", fit_x, fit_y, hp, seed=0),
                                   max(1, args.repeat // 2))
            outputs[label] = models.predict_proba(models.train("random_forest", fit_x, fit_y, hp, seed=0), fit_x)
    same = np.array_equal(outputs["python"], outputs["cython"])
    print(f"{'random forest fit (20 trees)':26s} {1e3 * times['python']:12.1f} {1e3 * times['cython']:12.1f}"
          f" {times['python'] / times['cython']:8.1f}x  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
