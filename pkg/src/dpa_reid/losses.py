"""Label-smoothed cross-entropy, batch-hard triplet loss and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor
from .exceptions import DegenerateBatch, LabelOutOfRange, ShapeMismatch

_BIG = 1e9
_DIST_FLOOR = 1e-12


@dataclass(frozen=True)
class LsceParams:
    epsilon: float = 0.1
    num_classes: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class HmtParams:
    margin: float = 0.3
    normalize: bool = False

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def smoothed_targets(labels, num_classes: int, epsilon: float) -> np.ndarray:
    """Rows of ``1 - eps*(N-1)/N`` on the true class and ``eps/N`` elsewhere."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    q = np.full((labels.size, num_classes), epsilon / num_classes)
    q[np.arange(labels.size), labels] = 1.0 - epsilon * (num_classes - 1) / num_classes
    return q


def lsce_loss(logits: Tensor, labels, params: LsceParams = LsceParams()) -> Tensor:
    """Batch-mean cross-entropy against label-smoothed targets."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be N×classes, got {logits.shape}")
    n, k = logits.shape
    if params.num_classes is not None and params.num_classes != k:
        raise ShapeMismatch(f"logits have {k} classes, params say {params.num_classes}")
    q = Tensor(smoothed_targets(labels, k, params.epsilon).astype(logits.dtype))
    if q.shape[0] != n:
        raise ShapeMismatch("labels and logits disagree on batch size")
    return F.neg(F.mul(F.sum(F.mul(q, F.log_softmax(logits, axis=1))), 1.0 / n))


def pairwise_euclidean(emb: Tensor) -> Tensor:
    n, d = emb.shape
    diff = F.sub(F.reshape(emb, (n, 1, d)), F.reshape(emb, (1, n, d)))
    sq = F.sum(F.mul(diff, diff), axis=2)
    return F.pow(F.clamp_min(sq, _DIST_FLOOR), 0.5)


def _l2_normalize(emb: Tensor) -> Tensor:
    norm = F.pow(F.clamp_min(F.sum(F.mul(emb, emb), axis=1, keepdims=True), _DIST_FLOOR), 0.5)
    return F.div(emb, norm)


def hmt_loss(embeddings: Tensor, labels, params: HmtParams = HmtParams()) -> Tensor:
    """Batch-hard triplet loss summed over every anchor with a positive and a negative.

    For each anchor the farthest same-label sample and the nearest
    different-label sample enter ``max(0, d_pos - d_neg + margin)``.
    Anchors lacking either are skipped.
    """
    if embeddings.ndim != 2:
        raise ShapeMismatch(f"embeddings must be N×D, got {embeddings.shape}")
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    if labels.shape != (n,):
        raise ShapeMismatch("labels and embeddings disagree on batch size")
    if params.normalize:
        embeddings = _l2_normalize(embeddings)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid.any():
        raise DegenerateBatch("no anchor has both a positive and a negative in the batch")
    dist = pairwise_euclidean(embeddings)
    # masked-out entries are pushed far outside the feasible range
    hardest_pos = F.max(F.sub(dist, Tensor(np.where(pos_mask, 0.0, _BIG))), axis=1)
    hardest_neg = F.min(F.add(dist, Tensor(np.where(neg_mask, 0.0, _BIG))), axis=1)
    hinge = F.relu(F.add(F.sub(hardest_pos, hardest_neg), params.margin))
    return F.sum(F.mul(hinge, Tensor(valid.astype(np.float64))))


def total_loss(logits: Tensor, embeddings: Tensor, labels, weights: LossWeights = LossWeights(),
               lsce: LsceParams = LsceParams(), hmt: HmtParams = HmtParams()):
    """Weighted sum ``lambda1 * LSCE + lambda2 * HMT``.

    Returns ``(total, lsce_value, hmt_value)`` so callers can log the parts.
    """
    if logits.shape[0] != embeddings.shape[0]:
        raise ShapeMismatch("logits and embeddings disagree on batch size")
    l1 = lsce_loss(logits, labels, lsce)
    l2 = hmt_loss(embeddings, labels, hmt)
    total = F.add(F.mul(l1, weights.lambda1), F.mul(l2, weights.lambda2))
    return total, l1, l2
