"""L2-regularized (optionally class-weighted) binary logistic regression.

Full-batch gradient descent with Armijo backtracking. The trial step starts
from the Barzilai-Borwein estimate of the previous iteration, which is still
plain gradient descent but converges far faster than a fixed initial step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FitError(ValueError):
    """Logistic fit impossible for the given labels."""


@dataclass
class ProbeModel:
    weights: np.ndarray
    bias: float
    validation_accuracy: float
    train_index: np.ndarray
    val_index: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool

    def decision(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.weights + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.decision(features) > 0).astype(int)


def _log1pexp(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sample_weights(labels: np.ndarray, class_weighted: bool) -> np.ndarray:
    y = np.asarray(labels)
    if not class_weighted:
        return np.ones(len(y))
    n = len(y)
    n1 = int(y.sum())
    n0 = n - n1
    return np.where(y == 1, n / (2.0 * n1), n / (2.0 * n0))


def logistic_loss(params: np.ndarray, X: np.ndarray, y: np.ndarray, sw: np.ndarray, l2: float) -> float:
    """Weighted mean log-loss plus (l2 / 2)||w||^2; ``params`` is [w..., b]; the bias is not penalized."""
    w, b = params[:-1], params[-1]
    z = X @ w + b
    per = _log1pexp(z) - y * z
    return float(np.dot(sw, per) / sw.sum() + 0.5 * l2 * np.dot(w, w))


def logistic_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray, sw: np.ndarray, l2: float) -> np.ndarray:
    w, b = params[:-1], params[-1]
    z = X @ w + b
    r = sw * (_sigmoid(z) - y) / sw.sum()
    g = np.empty_like(params)
    g[:-1] = X.T @ r + l2 * w
    g[-1] = r.sum()
    return g


def minimize_logistic(X: np.ndarray, y: np.ndarray, sw: np.ndarray, l2: float,
                      max_iter: int = 500, tol: float = 1e-6) -> tuple[np.ndarray, int, float, bool]:
    params = np.zeros(X.shape[1] + 1)
    loss = logistic_loss(params, X, y, sw, l2)
    g = logistic_grad(params, X, y, sw, l2)
    step = 1.0
    it = 0
    gnorm = float(np.linalg.norm(g))
    while gnorm > tol and it < max_iter:
        gg = float(np.dot(g, g))
        t = step
        for _ in range(60):
            cand = params - t * g
            new_loss = logistic_loss(cand, X, y, sw, l2)
            if new_loss <= loss - 1e-4 * t * gg:
                break
            t *= 0.5
        else:
            break  # no descent possible at machine precision
        new_g = logistic_grad(cand, X, y, sw, l2)
        s = cand - params
        dy = new_g - g
        sy = float(np.dot(s, dy))
        step = float(np.dot(s, s)) / sy if sy > 0 else 2.0 * t
        params, loss, g = cand, new_loss, new_g
        gnorm = float(np.linalg.norm(g))
        it += 1
    return params, it, gnorm, gnorm <= tol


def stratified_holdout(labels: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seed-deterministic split keeping each class's share in the holdout."""
    y = np.asarray(labels)
    rng = np.random.default_rng([int(seed), 0x401D])
    val = []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        k = min(max(1, int(round(fraction * len(idx)))), len(idx) - 1)
        val.append(idx[:k])
    val_idx = np.sort(np.concatenate(val))
    train_mask = np.ones(len(y), dtype=bool)
    train_mask[val_idx] = False
    return np.flatnonzero(train_mask), val_idx


def fit_logistic(features, labels, l2: float = 1e-2, class_weighted: bool = True,
                 holdout_fraction: float = 0.2, seed: int = 0,
                 max_iter: int = 500, tol: float = 1e-6) -> ProbeModel:
    """Fit on a stratified training split and report plain accuracy on the holdout."""
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels).astype(int).ravel()
    if len(y) != len(X):
        raise ValueError("features and labels differ in length")
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be binary")
    if not 0.0 < holdout_fraction <= 0.5:
        raise ValueError("holdout_fraction must lie in (0, 0.5]")
    if min(int(y.sum()), int(len(y) - y.sum())) < 2:
        raise FitError("need at least 2 examples of each class")
    tr, va = stratified_holdout(y, holdout_fraction, seed)
    sw = sample_weights(y[tr], class_weighted)
    params, it, gnorm, ok = minimize_logistic(X[tr], y[tr].astype(float), sw, l2, max_iter, tol)
    model = ProbeModel(params[:-1].copy(), float(params[-1]), 0.0, tr, va, it, gnorm, ok)
    model.validation_accuracy = float(np.mean(model.predict(X[va]) == y[va]))
    return model
