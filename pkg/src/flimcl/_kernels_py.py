"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def best_split(X, y, w, samples, features, n_classes, min_leaf):
    samples = np.asarray(samples, dtype=np.int64)
    m = len(samples)
    ys = y[samples]
    ws = w[samples]
    total = np.bincount(ys, weights=ws, minlength=n_classes)
    # sequential sums throughout so rounding matches the compiled loop bit for bit
    w_total = np.cumsum(ws)[-1]
    best = (-1, 0.0, np.inf)
    pos = np.arange(1, m)
    size_ok = (pos >= min_leaf) & (m - pos >= min_leaf)
    for f in features:
        xs = X[samples, f]
        order = np.argsort(xs, kind="stable")
        xo = xs[order]
        if xo[0] == xo[-1]:
            continue
        onehot = np.zeros((m, n_classes))
        onehot[np.arange(m), ys[order]] = ws[order]
        left = np.cumsum(onehot, axis=0)[:-1]
        w_left = np.cumsum(ws[order])[:-1]
        w_right = w_total - w_left
        right = total - left
        ok = size_ok & (xo[:-1] != xo[1:])
        if not ok.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            sq_l = np.cumsum(left ** 2, axis=1)[:, -1]
            sq_r = np.cumsum(right ** 2, axis=1)[:, -1]
            score = (w_left - sq_l / w_left) + (w_right - sq_r / w_right)
        score = np.where(ok, score, np.inf)
        i = int(np.argmin(score))
        if score[i] < best[2]:
            best = (int(f), float(0.5 * (xo[i] + xo[i + 1])), float(score[i]))
    return best


def tree_apply(X, feature, threshold, left, right):
    n = X.shape[0]
    node = np.zeros(n, dtype=np.int64)
    active = feature[node] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        nd = node[idx]
        go_left = X[idx, feature[nd]] <= threshold[nd]
        node[idx] = np.where(go_left, left[nd], right[nd])
        active[idx] = feature[node[idx]] >= 0
    return node


def confident_joint_counts(labels, pred, cs, thresholds, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    confident = np.asarray(cs) >= np.asarray(thresholds)[pred]
    cj = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cj, (labels[confident], pred[confident]), 1)
    flags = (confident & (pred != labels)).astype(np.int64)
    return cj, flags
