"""Multinomial logistic regression and the local SGD trainer.

Parameters are a flat float64 vector laid out class-major: for each class
``k`` the ``n_features`` weights followed by the bias, so the dimension is
``n_classes * (n_features + 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class ModelShape:
    n_features: int
    n_classes: int

    def __post_init__(self):
        if self.n_features < 1:
            raise ValueError("n_features must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    @property
    def dim(self) -> int:
        return self.n_classes * (self.n_features + 1)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 10
    learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")


def _unpack(params, shape: ModelShape):
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != shape.dim:
        raise ShapeError(f"expected {shape.dim} parameters, got {params.size}")
    table = params.reshape(shape.n_classes, shape.n_features + 1)
    return table[:, :-1], table[:, -1]


def _check_features(x, shape: ModelShape) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != shape.n_features:
        raise ShapeError(f"expected {shape.n_features} features, got {x.shape[-1]}")
    return x


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(params, shape: ModelShape, features) -> np.ndarray:
    """Class probabilities for one feature vector or a 2-D batch."""
    w, b = _unpack(params, shape)
    x = _check_features(features, shape)
    return _softmax(x @ w.T + b)


predict = predict_proba


def loss(params, shape: ModelShape, features, labels) -> float:
    """Mean cross-entropy."""
    w, b = _unpack(params, shape)
    x = _check_features(np.atleast_2d(features), shape)
    labels = np.asarray(labels, dtype=np.int64)
    scores = x @ w.T + b
    m = scores.max(axis=1, keepdims=True)
    logz = (m + np.log(np.exp(scores - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(logz - scores[np.arange(len(labels)), labels]))


def gradient(params, shape: ModelShape, features, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy over a batch, same layout as params."""
    x = _check_features(np.atleast_2d(features), shape)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0 or x.shape[0] == 0:
        raise ValueError("empty batch")
    if len(labels) != x.shape[0]:
        raise ShapeError("features and labels differ in length")
    if labels.min() < 0 or labels.max() >= shape.n_classes:
        raise ValueError("label out of range")
    p = predict_proba(params, shape, x)
    p[np.arange(len(labels)), labels] -= 1.0
    p /= len(labels)
    grad = np.empty((shape.n_classes, shape.n_features + 1))
    grad[:, :-1] = p.T @ x
    grad[:, -1] = p.sum(axis=0)
    return grad.ravel()


def accuracy(params, shape: ModelShape, features, labels) -> float:
    if len(labels) == 0:
        return 0.0
    w, b = _unpack(params, shape)
    x = _check_features(features, shape)
    # ties resolve to the lowest class index, so an all-zero model predicts class 0
    pred = np.argmax(x @ w.T + b, axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Fisher-Yates permutation keyed on (seed, epoch); independent of call history."""
    rng = np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF, counter=epoch))
    return rng.permutation(n)


def local_train(global_params, shape: ModelShape, features, labels, cfg: TrainConfig) -> np.ndarray:
    """Warm-start from the global model, run minibatch SGD, return trained - global."""
    start = np.array(global_params, dtype=np.float64)
    x = _check_features(np.atleast_2d(features), shape)
    y = np.asarray(labels, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise ValueError("empty shard")
    if y.min() < 0 or y.max() >= shape.n_classes:
        raise ValueError("label out of range")
    _unpack(start, shape)
    if cfg.learning_rate == 0:
        return np.zeros_like(start)
    table = start.reshape(shape.n_classes, shape.n_features + 1).copy()
    # inlined gradient(): same arithmetic, without per-batch validation
    w, b = table[:, :-1], table[:, -1]
    onehot = np.eye(shape.n_classes)[y]
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        order = epoch_order(n, cfg.seed, epoch)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = x[idx]
            p = _softmax(xb @ w.T + b)
            p -= onehot[idx]
            p /= len(idx)
            w -= lr * (p.T @ xb)
            b -= lr * p.sum(axis=0)
    return table.ravel() - start
