"""Multilayer perceptron: ReLU hidden layers, softmax output, momentum SGD."""
from __future__ import annotations

import numpy as np

from .common import softmax


def init_params(sizes, rng: np.random.Generator) -> list[np.ndarray]:
    """He-initialised weights and zero biases, flattened as [W1, b1, W2, b2, ...]."""
    params = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        params.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
        params.append(np.zeros(b))
    return params


def forward(params, x):
    acts = [x]
    h = x
    n_layers = len(params) // 2
    for i in range(n_layers):
        z = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            return softmax(z), acts
    raise AssertionError("unreachable")


def predict(params, x) -> np.ndarray:
    return forward(params, x)[0]


def loss_and_grad(params, x, y, w, l2: float = 0.0):
    """Weighted mean cross-entropy (normalised by sum of weights) plus ``l2/2 * ||W||^2``."""
    p, acts = forward(params, x)
    n_layers = len(params) // 2
    wsum = w.sum()
    rows = np.arange(len(y))
    loss = -(w * np.log(p[rows, y] + 1e-300)).sum() / wsum
    loss += 0.5 * l2 * sum((params[2 * i] ** 2).sum() for i in range(n_layers))

    delta = p.copy()
    delta[rows, y] -= 1.0
    delta *= (w / wsum)[:, None]
    grads = [None] * len(params)
    for i in reversed(range(n_layers)):
        a = acts[i]
        grads[2 * i] = a.T @ delta + l2 * params[2 * i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params[2 * i].T) * (acts[i] > 0)
    return float(loss), grads


def fit(x, y, w, n_classes, rng, hidden=(64, 32), lr=0.05, momentum=0.9, batch_size=128,
        max_epochs=150, patience=12, l2=1e-4, val=None):
    """Mini-batch SGD with momentum; early stopping on ``val = (x, y, w)`` if given."""
    sizes = [x.shape[1], *hidden, n_classes]
    params = init_params(sizes, rng)
    velocity = [np.zeros_like(p) for p in params]
    best = None
    best_loss = np.inf
    stale = 0
    n = len(x)
    for _ in range(max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, grads = loss_and_grad(params, x[idx], y[idx], w[idx], l2)
            for p, v, g in zip(params, velocity, grads):
                v *= momentum
                v -= lr * g
                p += v
        if val is not None:
            xv, yv, wv = val
            pv = predict(params, xv)
            vloss = -(wv * np.log(pv[np.arange(len(yv)), yv] + 1e-300)).sum() / wv.sum()
            if vloss < best_loss - 1e-6:
                best_loss = vloss
                best = [p.copy() for p in params]
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
    return best if best is not None else params
