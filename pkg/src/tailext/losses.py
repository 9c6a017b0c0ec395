"""Scoring objectives: balanced error, balanced softmax cross-entropy over the
target or merged label space, and the neighbor-silencing loss, each with
analytic gradients with respect to logits.

All exponent sums are computed after shifting by the maximum combined exponent
(logit plus log-count offset); class counts can differ by factors of several
hundred, so the log offsets alone are large enough to overflow a naive
implementation. Parameter gradients are composed in the model module via the
chain rule, keeping every loss here model-agnostic and pure.
"""
from __future__ import annotations

import warnings
from typing import NamedTuple, Sequence

import numpy as np

from .core import ClassStats, DataError, LabelSpace

__all__ = [
    "BalancedError",
    "SilenceWeights",
    "balanced_error",
    "bal_ce",
    "bal_ce_batch",
    "bal_ce_merged",
    "ns_ce",
    "ns_ce_batch",
    "batch_loss",
]


class BalancedError(NamedTuple):
    """Both readings of the balanced error: the literal per-class sum and the
    conventional mean (sum / num_classes)."""

    sum: float
    mean: float


def balanced_error(
    predictions: Sequence[int], labels: Sequence[int], num_classes: int
) -> BalancedError:
    """Per-class error rates P(pred != y | y), summed and averaged over classes.

    Every class id in range(num_classes) must have at least one labeled sample;
    a class with no test samples has an undefined error rate and is rejected.
    """
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise DataError("predictions and labels must be 1-d and the same length")
    if num_classes < 1:
        raise DataError("num_classes must be >= 1")
    total = np.bincount(labs, minlength=num_classes)[:num_classes]
    if (total == 0).any():
        missing = np.flatnonzero(total == 0)
        raise DataError(f"classes {missing.tolist()} have zero test samples")
    wrong = np.bincount(labs[preds != labs], minlength=num_classes)[:num_classes]
    rates = wrong.astype(np.float64) / total.astype(np.float64)
    s = float(rates.sum())
    return BalancedError(sum=s, mean=s / num_classes)


def _check_logits(z: np.ndarray, n_classes: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (n_classes,):
        raise DataError(f"logit vector shape {z.shape} != ({n_classes},)")
    if not np.isfinite(z).all():
        raise DataError("non-finite logits")
    return z


def bal_ce(z: np.ndarray, true_class: int, stats: ClassStats) -> tuple[float, np.ndarray]:
    """Balanced softmax cross-entropy: -log(n_y e^{z_y} / sum_j n_j e^{z_j}).

    Returns (loss, gradient wrt z). The gradient is softmax(z + log n) minus
    the one-hot of ``true_class``. Uniform counts reduce this to standard
    softmax cross-entropy.
    """
    z = _check_logits(z, len(stats))
    if not 0 <= true_class < len(stats):
        raise DataError(f"true_class {true_class} out of range for {len(stats)} classes")
    u = z + stats.log_counts()
    m = u.max()
    exp_u = np.exp(u - m)
    total = exp_u.sum()
    loss = float(m + np.log(total) - u[true_class])
    grad = exp_u / total
    grad[true_class] -= 1.0
    return loss, grad


def bal_ce_merged(
    z: np.ndarray, true_class: int, stats: ClassStats
) -> tuple[float, np.ndarray]:
    """Balanced softmax CE over the merged L+K label space.

    The auxiliary classes simply extend the denominator sum, so the math is
    identical to :func:`bal_ce` applied to the full vector.
    """
    return bal_ce(z, true_class, stats)


class SilenceWeights:
    """Pair weights for the neighbor-silencing loss, evaluated on demand.

    lambda_ij = lambda_s when one of the pair is auxiliary and is the queried
    neighbor of the other, else 1. The relation holds only between a target
    and its own auxiliary classes: two auxiliaries queried from the same
    target do not silence each other, and target-target pairs always weigh 1.
    The relation is sparse (one entry per auxiliary class), so rows are built
    per true class instead of materializing the dense pairwise matrix.
    """

    def __init__(self, space: LabelSpace, lambda_s: float):
        if lambda_s < 0:
            raise DataError(f"lambda_s must be >= 0, got {lambda_s}")
        if lambda_s > 1:
            warnings.warn(
                f"lambda_s={lambda_s} > 1 amplifies neighbor competition", stacklevel=2
            )
        self.space = space
        self.lambda_s = float(lambda_s)
        by_target: dict[int, list[int]] = {}
        for aux, tgt in sorted(space.neighbor_of.items()):
            by_target.setdefault(tgt, []).append(aux)
        self._aux_by_target = {
            t: np.asarray(a, dtype=np.int64) for t, a in by_target.items()
        }

    def silenced_indices(self, true_class: int) -> np.ndarray:
        """Class ids whose pair weight with ``true_class`` is lambda_s."""
        space = self.space
        if space.is_auxiliary(true_class):
            return np.asarray([space.neighbor_of[true_class]], dtype=np.int64)
        return self._aux_by_target.get(true_class, np.empty(0, dtype=np.int64))

    def pair_weight(self, i: int, j: int) -> float:
        if i == j:
            return 1.0
        space = self.space
        if space.is_auxiliary(i) and space.neighbor_of[i] == j:
            return self.lambda_s
        if space.is_auxiliary(j) and space.neighbor_of[j] == i:
            return self.lambda_s
        return 1.0

    def rows(self, labels: np.ndarray, n_classes: int) -> np.ndarray:
        """Weight matrix (B, n_classes): row b holds lambda_{labels[b], j}."""
        w = np.ones((labels.size, n_classes), dtype=np.float64)
        for b, y in enumerate(labels):
            idx = self.silenced_indices(int(y))
            if idx.size:
                w[b, idx] = self.lambda_s
        return w


def ns_ce_batch(
    Z: np.ndarray,
    labels: np.ndarray,
    stats: ClassStats,
    space: LabelSpace,
    lambda_s: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized neighbor-silencing loss over a batch of logit rows.

    loss_b = log[1 + sum_{j != y_b} lambda_{y_b j} e^{log n_j - log n_{y_b} + z_j - z_{y_b}}]

    Returns (losses (B,), gradients (B, M)). Folding the leading 1 in as the
    true class's own term (exponent 0, weight 1) turns the expression into a
    weighted log-sum-exp; the shift uses the max exponent among positive
    weights only, so fully silenced terms (lambda_s = 0) cannot drag the
    reference below every surviving term.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != len(stats):
        raise DataError(f"logits shape {Z.shape} != (B, {len(stats)})")
    if not np.isfinite(Z).all():
        raise DataError("non-finite logits")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= len(stats):
        raise DataError("labels out of range")
    if len(stats) != space.num_classes:
        raise DataError(
            f"stats cover {len(stats)} classes but label space has {space.num_classes}"
        )
    weights = SilenceWeights(space, lambda_s)
    B = Z.shape[0]
    rows = np.arange(B)
    u = Z + stats.log_counts()[None, :]
    t = u - u[rows, labels][:, None]
    w = weights.rows(labels, len(stats))
    w[rows, labels] = 1.0
    support = w > 0
    m = np.where(support, t, -np.inf).max(axis=1)
    scaled = w * np.exp(t - m[:, None])
    total = scaled.sum(axis=1)
    losses = m + np.log(total)
    grads = scaled / total[:, None]
    grads[rows, labels] -= 1.0
    return losses, grads


def ns_ce(
    z: np.ndarray,
    true_class: int,
    stats: ClassStats,
    space: LabelSpace,
    lambda_s: float,
) -> tuple[float, np.ndarray]:
    """Neighbor-silencing loss for a single sample; see :func:`ns_ce_batch`.

    lambda_s = 1 recovers the merged-space balanced CE exactly; lambda_s = 0
    removes the true class's own neighbors from the competition entirely.
    """
    z = _check_logits(z, len(stats))
    if not 0 <= true_class < space.num_classes:
        raise DataError(f"true_class {true_class} out of range")
    losses, grads = ns_ce_batch(
        z[None, :], np.asarray([true_class]), stats, space, lambda_s
    )
    return float(losses[0]), grads[0]


def bal_ce_batch(
    Z: np.ndarray, labels: np.ndarray, stats: ClassStats
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`bal_ce`; returns (losses (B,), gradients (B, M))."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != len(stats):
        raise DataError(f"logits shape {Z.shape} != (B, {len(stats)})")
    if not np.isfinite(Z).all():
        raise DataError("non-finite logits")
    labels = np.asarray(labels, dtype=np.int64)
    u = Z + stats.log_counts()[None, :]
    m = u.max(axis=1)
    exp_u = np.exp(u - m[:, None])
    total = exp_u.sum(axis=1)
    rows = np.arange(Z.shape[0])
    losses = m + np.log(total) - u[rows, labels]
    grads = exp_u / total[:, None]
    grads[rows, labels] -= 1.0
    return losses, grads


def batch_loss(
    batch: Sequence[tuple[np.ndarray, int]],
    loss_kind: str,
    stats: ClassStats,
    space: LabelSpace | None = None,
    lambda_s: float | None = None,
) -> tuple[float, np.ndarray]:
    """Arithmetic mean of per-sample losses plus the per-sample gradients.

    ``loss_kind`` is one of "bal_ce", "bal_ce_merged", "ns_ce"; the latter
    requires ``space`` and ``lambda_s``. Gradients are aligned with the input
    order and are per-sample (not divided by the batch size).
    """
    if not batch:
        raise DataError("empty batch")
    Z = np.stack([np.asarray(z, dtype=np.float64) for z, _ in batch])
    labels = np.asarray([y for _, y in batch], dtype=np.int64)
    if loss_kind in ("bal_ce", "bal_ce_merged"):
        losses, grads = bal_ce_batch(Z, labels, stats)
    elif loss_kind == "ns_ce":
        if space is None or lambda_s is None:
            raise DataError("ns_ce needs space and lambda_s")
        losses, grads = ns_ce_batch(Z, labels, stats, space, lambda_s)
    else:
        raise DataError(f"unknown loss kind {loss_kind!r}")
    return float(losses.mean()), grads
