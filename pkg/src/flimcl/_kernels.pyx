# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Mirrors ``_kernels_py`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


def best_split(const double[:, ::1] X, const cnp.int64_t[::1] y, const double[::1] w,
               cnp.int64_t[::1] samples, cnp.int64_t[::1] features,
               int n_classes, int min_leaf):
    """Best (feature, threshold) by weighted Gini over ``samples``.

    Returns ``(feature, threshold, score)`` with ``feature == -1`` when no split
    leaves ``min_leaf`` samples on both sides. ``score`` is the weighted child
    impurity sum_k (W_k - sum_c n_kc^2 / W_k).
    """
    cdef Py_ssize_t m = samples.shape[0]
    cdef Py_ssize_t nf = features.shape[0]
    cdef Py_ssize_t i, j, c, fi
    cdef cnp.int64_t f, s
    cdef double *left = <double *> malloc(n_classes * sizeof(double))
    cdef double *total = <double *> malloc(n_classes * sizeof(double))
    cdef double w_total = 0.0, w_left, w_right, sq_l, sq_r, r, score, xa, xb
    cdef double best_score = np.inf, best_thr = 0.0
    cdef cnp.int64_t best_f = -1
    cdef double[::1] xs = np.empty(m)
    cdef cnp.int64_t[::1] order
    try:
        for c in range(n_classes):
            total[c] = 0.0
        for i in range(m):
            s = samples[i]
            total[y[s]] += w[s]
            w_total += w[s]
        for fi in range(nf):
            f = features[fi]
            for i in range(m):
                xs[i] = X[samples[i], f]
            order = np.argsort(xs, kind="stable").astype(np.int64)
            if xs[order[0]] == xs[order[m - 1]]:
                continue
            for c in range(n_classes):
                left[c] = 0.0
            w_left = 0.0
            for i in range(m - 1):
                s = samples[order[i]]
                left[y[s]] += w[s]
                w_left += w[s]
                if i + 1 < min_leaf or m - i - 1 < min_leaf:
                    continue
                xa = xs[order[i]]
                xb = xs[order[i + 1]]
                if xa == xb:
                    continue
                w_right = w_total - w_left
                sq_l = 0.0
                sq_r = 0.0
                for c in range(n_classes):
                    sq_l += left[c] * left[c]
                    r = total[c] - left[c]
                    sq_r += r * r
                score = (w_left - sq_l / w_left) + (w_right - sq_r / w_right)
                if score < best_score:
                    best_score = score
                    best_f = f
                    best_thr = 0.5 * (xa + xb)
    finally:
        free(left)
        free(total)
    return int(best_f), float(best_thr), float(best_score)


def tree_apply(const double[:, ::1] X, const cnp.int64_t[::1] feature,
               const double[::1] threshold, const cnp.int64_t[::1] left,
               const cnp.int64_t[::1] right):
    """Leaf node index reached by every row (``feature < 0`` marks a leaf)."""
    cdef Py_ssize_t n = X.shape[0], i
    cdef cnp.int64_t node
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        o[i] = node
    return out


def confident_joint_counts(const cnp.int64_t[::1] labels, const cnp.int64_t[::1] pred,
                           const double[::1] cs, const double[::1] thresholds, int n_classes):
    """Confident joint matrix and off-diagonal (low-confidence) flags."""
    cdef Py_ssize_t n = labels.shape[0], k
    cj = np.zeros((n_classes, n_classes), dtype=np.int64)
    flags = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] C = cj
    cdef cnp.int64_t[::1] F = flags
    for k in range(n):
        if cs[k] >= thresholds[pred[k]]:
            C[labels[k], pred[k]] += 1
            if pred[k] != labels[k]:
                F[k] = 1
    return cj, flags
