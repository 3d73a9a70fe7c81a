"""Multinomial logistic regression fitted with L-BFGS."""
import numpy as np
from scipy.optimize import minimize

from .common import softmax


def loss_and_grad(theta, x, y, w, n_classes, l2):
    d = x.shape[1]
    W = theta[: d * n_classes].reshape(d, n_classes)
    b = theta[d * n_classes:]
    p = softmax(x @ W + b)
    rows = np.arange(len(y))
    wsum = w.sum()
    loss = -(w * np.log(p[rows, y] + 1e-300)).sum() / wsum + 0.5 * l2 * (W ** 2).sum()
    delta = p
    delta[rows, y] -= 1.0
    delta *= (w / wsum)[:, None]
    gW = x.T @ delta + l2 * W
    gb = delta.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def fit(x, y, w, n_classes, l2=1e-3, max_iter=500):
    d = x.shape[1]
    theta0 = np.zeros(d * n_classes + n_classes)
    res = minimize(loss_and_grad, theta0, args=(x, y, w, n_classes, l2), jac=True,
                   method="L-BFGS-B", options={"maxiter": max_iter})
    theta = res.x
    return {"W": theta[: d * n_classes].reshape(d, n_classes), "b": theta[d * n_classes:]}


def predict(params, x):
    return softmax(x @ params["W"] + params["b"])
