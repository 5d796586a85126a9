"""Trainable models, per-sample losses and their analytic gradients.

Parameters are flat float64 vectors.  Layouts:

* linear / logistic: ``[w_0 .. w_{p-1}, bias]``  (d = p + 1)
* mlp-1-hidden:      ``[W1 (h x p, row-major), b1 (h), w2 (h), b2]``
  with a tanh hidden layer and a sigmoid output (binary classification).

Losses are batch means: halved squared error for linear regression, binary
cross-entropy for the two classifiers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

KINDS = ("linear-regression", "logistic-regression", "mlp-1-hidden")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    hidden_width: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}", "model.kind")
        if self.input_dim < 1:
            raise ConfigError("must be >= 1", "model.input_dim")
        if self.kind == "mlp-1-hidden" and self.hidden_width < 1:
            raise ConfigError("mlp needs hidden_width >= 1", "model.hidden_width")

    @property
    def num_params(self) -> int:
        p, h = self.input_dim, self.hidden_width
        if self.kind == "mlp-1-hidden":
            return h * p + 2 * h + 1
        return p + 1

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear-regression"

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Zero init for convex models; small random init for the MLP."""
        if self.kind != "mlp-1-hidden":
            return np.zeros(self.num_params)
        if rng is None:
            raise ConfigError("mlp initialisation needs an rng")
        p, h = self.input_dim, self.hidden_width
        params = np.zeros(self.num_params)
        params[: h * p] = rng.normal(0.0, 1.0 / np.sqrt(p), h * p)
        params[h * p + h : h * p + 2 * h] = rng.normal(0.0, 1.0 / np.sqrt(h), h)
        return params


def _check(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> None:
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise ConfigError(
            f"expected {spec.num_params} parameters, got shape {params.shape}"
        )
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ConfigError(f"expected features of width {spec.input_dim}, got {X.shape}")


def _unpack_mlp(spec: ModelSpec, params: np.ndarray):
    p, h = spec.input_dim, spec.hidden_width
    W1 = params[: h * p].reshape(h, p)
    b1 = params[h * p : h * p + h]
    w2 = params[h * p + h : h * p + 2 * h]
    b2 = params[-1]
    return W1, b1, w2, b2


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def decision(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Raw model output before any link function."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    params = np.asarray(params, dtype=float)
    _check(spec, params, X)
    if spec.kind == "mlp-1-hidden":
        W1, b1, w2, b2 = _unpack_mlp(spec, params)
        return np.tanh(X @ W1.T + b1) @ w2 + b2
    return X @ params[:-1] + params[-1]


def predict(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Predicted value (regression) or positive-class probability."""
    z = decision(spec, params, X)
    return sigmoid(z) if spec.is_classifier else z


def per_sample_loss(spec, params, X, y) -> np.ndarray:
    z = decision(spec, params, X)
    y = np.asarray(y, dtype=float)
    if spec.is_classifier:
        return np.logaddexp(0.0, z) - y * z
    return 0.5 * (z - y) ** 2


def loss(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ConfigError("loss of an empty batch")
    return float(np.mean(per_sample_loss(spec, params, X, y)))


def gradient(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    params = np.asarray(params, dtype=float)
    _check(spec, params, X)
    n = len(y)
    if n == 0:
        raise ConfigError("gradient of an empty batch")
    if spec.kind == "mlp-1-hidden":
        W1, b1, w2, b2 = _unpack_mlp(spec, params)
        H = np.tanh(X @ W1.T + b1)
        r = (sigmoid(H @ w2 + b2) - y) / n
        dpre = np.outer(r, w2) * (1.0 - H**2)
        return np.concatenate([(dpre.T @ X).ravel(), dpre.sum(0), H.T @ r, [r.sum()]])
    z = X @ params[:-1] + params[-1]
    r = ((sigmoid(z) if spec.is_classifier else z) - y) / n
    return np.append(X.T @ r, r.sum())


def hessian_vector(spec, params, X, y, v, eps=1e-5) -> np.ndarray:
    """H v, exact for the convex models and a central difference for the MLP."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    v = np.asarray(v, dtype=float)
    if spec.kind == "mlp-1-hidden":
        return (gradient(spec, params + eps * v, X, y) - gradient(spec, params - eps * v, X, y)) / (2 * eps)
    z = X @ params[:-1] + params[-1]
    curv = sigmoid(z) * (1.0 - sigmoid(z)) if spec.is_classifier else np.ones_like(z)
    u = curv * (X @ v[:-1] + v[-1]) / len(z)
    return np.append(X.T @ u, u.sum())


def global_objective(spec: ModelSpec, params: np.ndarray, partitions) -> float:
    """Sample-weighted mean of client losses, sum_k (n_k / n) F_k(w)."""
    partitions = list(partitions)
    if not partitions:
        raise ConfigError("global objective over zero clients")
    n = sum(c.n for c in partitions)
    return float(sum(c.n / n * loss(spec, params, c.X, c.y) for c in partitions))


def global_gradient(spec: ModelSpec, params: np.ndarray, partitions) -> np.ndarray:
    partitions = list(partitions)
    n = sum(c.n for c in partitions)
    return sum(c.n / n * gradient(spec, params, c.X, c.y) for c in partitions)


def f1_score(y_true, y_pred) -> float:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    tp = np.sum(y_true & y_pred)
    denom = 2 * tp + np.sum(~y_true & y_pred) + np.sum(y_true & ~y_pred)
    return float(2 * tp / denom) if denom else 0.0


def evaluate_metric(spec: ModelSpec, params, X, y) -> float:
    """F1 at threshold 0.5 for classifiers, coefficient of determination otherwise."""
    pred = predict(spec, params, X)
    if spec.is_classifier:
        return f1_score(y, pred >= 0.5)
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    ss_res = float(np.sum((y - pred) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
