"""Training objectives: view negative log-likelihood, positive-rate weighted
binary cross-entropy, and their affine combination."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import Tensor

LOG_FLOOR = 1e-12
RIGHT_VIEW = 3


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    positive_rates: list[float] | None = field(default=None)

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.positive_rates is not None:
            _check_rates(np.asarray(self.positive_rates, dtype=np.float64))


def _check_rates(rates: np.ndarray) -> None:
    if np.any(rates < 0) or np.any(rates > 1) or not np.all(np.isfinite(rates)):
        raise ValueError(f"positive rates must lie in [0, 1], got {rates.tolist()}")


def view_loss(view_logits: Tensor, view_labels, num_views: int = 4) -> Tensor:
    """``-1/(T*L) * sum_l log softmax(logits_l)[label_l]`` over the active views.

    With ``num_views=3`` the right-view logit is dropped and right-view samples
    are excluded; ``L`` counts the samples that remain.
    """
    labels = np.asarray(view_labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise ValueError("view_loss: empty batch")
    if view_logits.ndim != 2 or view_logits.shape[0] != labels.size:
        raise nx.ShapeError(f"view_loss: logits {view_logits.shape} vs {labels.size} labels")
    if np.any(labels < 0) or np.any(labels > 3):
        raise ValueError("view labels must be in 0..3")
    logits = view_logits
    if num_views == 3:
        keep = np.flatnonzero(labels != RIGHT_VIEW)
        if keep.size == 0:
            return Tensor(0.0)
        logits = nx.take(view_logits, (keep, slice(0, 3)))
        labels = labels[keep]
    elif num_views != 4:
        raise ValueError("num_views must be 3 or 4")
    logp = nx.log_softmax(logits, axis=-1)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return (logp * onehot).sum() * (-1.0 / (num_views * labels.size))


def attr_loss(attr_logits: Tensor, labels, rates) -> Tensor:
    """Weighted BCE with ``w = exp(1 - r_j)`` on positives and ``exp(r_j)`` on negatives."""
    y = np.asarray(labels, dtype=np.float64)
    r = np.asarray(rates, dtype=np.float64).reshape(-1)
    _check_rates(r)
    if attr_logits.shape != y.shape or y.ndim != 2:
        raise nx.ShapeError(f"attr_loss: logits {attr_logits.shape} vs labels {y.shape}")
    if r.size != y.shape[1]:
        raise nx.ShapeError(f"attr_loss: {r.size} rates for {y.shape[1]} attributes")
    w = np.where(y == 1, np.exp(1.0 - r), np.exp(r))
    log_p = nx.clamped_log(nx.sigmoid(attr_logits), LOG_FLOOR)
    log_q = nx.clamped_log(nx.sigmoid(-attr_logits), LOG_FLOOR)
    ll = log_p * (w * y) + log_q * (w * (1.0 - y))
    return ll.sum() * (-1.0 / y.shape[0])


def bce(attr_logits: Tensor, labels) -> Tensor:
    """Unweighted mean-over-samples BCE (same clamp), for reference."""
    y = np.asarray(labels, dtype=np.float64)
    log_p = nx.clamped_log(nx.sigmoid(attr_logits), LOG_FLOOR)
    log_q = nx.clamped_log(nx.sigmoid(-attr_logits), LOG_FLOOR)
    return (log_p * y + log_q * (1.0 - y)).sum() * (-1.0 / y.shape[0])


def combined_loss(l_vp, l_a, alpha: float = 1.0, beta: float = 1.0):
    return l_vp * alpha + l_a * beta


def positive_rates(labels) -> np.ndarray:
    """Fraction of positive samples per attribute; accepts ``N x K`` labels or a dataset."""
    if hasattr(labels, "attr_matrix"):
        labels = labels.attr_matrix()
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] == 0:
        raise ValueError("positive_rates: need a non-empty N x K label matrix")
    return y.sum(axis=0) / y.shape[0]
