"""Losses returning ``(value, gradient w.r.t. prediction)``."""

from __future__ import annotations

import numpy as np


def mse(pred: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """(1/N) * sum_i w_i (pred_i - target_i)^2 over the flattened batch."""
    pred = np.asarray(pred)
    if pred.size == 0:
        raise ValueError("mse of an empty batch")
    diff = pred - np.asarray(target, dtype=pred.dtype)
    w = np.ones_like(diff) if weights is None else np.asarray(weights, dtype=pred.dtype).reshape(diff.shape)
    if np.any(w < 0):
        raise ValueError("mse weights must be nonnegative")
    n = diff.size
    value = float(np.sum(w * diff * diff) / n)
    return value, (2.0 / n) * w * diff


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                           class_weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """-(1/N) * sum_j alpha_{c_j} log softmax(logits_j)[c_j].

    Accepts a single logit vector with a scalar label, or a batch.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross-entropy of an empty batch")
    alpha = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=float)
    if np.any(alpha < 0):
        raise ValueError("class weights must be nonnegative")
    logp = log_softmax(logits)
    w = alpha[labels].astype(logits.dtype)
    value = float(-np.sum(w * logp[np.arange(n), labels]) / n)
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    grad *= (w / n)[:, None]
    return value, (grad[0] if single else grad)
