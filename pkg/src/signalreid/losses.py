"""Identity supervision losses and the weighted total objective."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def label_smooth_ce(logits: Tensor, labels, epsilon: float = 0.1) -> Tensor:
    """Cross entropy against targets with 1-eps on the true class and eps/(C-1) elsewhere."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if labels.shape != (B,) or np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"labels must be {B} class indices in [0, {C})")
    off = epsilon / (C - 1) if C > 1 else 0.0
    target = np.full((B, C), off)
    target[np.arange(B), labels] = 1.0 - epsilon if C > 1 else 1.0
    logp = T.log_softmax_lastdim(logits)
    return -T.sum_(logp * target) * (1.0 / B)


def pairwise_distances(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Euclidean distances ``[B, B]``; squared distances are floored before the sqrt."""
    B, E = x.shape
    diff = T.reshape(x, (B, 1, E)) - T.reshape(x, (1, B, E))
    return T.sqrt(T.clamp_min(T.sum_(diff * diff, axis=-1), floor))


def check_pk_batch(labels) -> None:
    counts = Counter(np.asarray(labels).tolist())
    if len(counts) < 2 or min(counts.values()) < 2:
        raise ValueError(f"batch-hard mining needs >= 2 identities with >= 2 samples each, got {dict(counts)}")


def batch_hard_triplet(embeddings: Tensor, labels, margin: float = 0.3) -> Tensor:
    """mean(max(0, hardest-positive distance - hardest-negative distance + margin))."""
    labels = np.asarray(labels)
    check_pk_batch(labels)
    dist = pairwise_distances(T.as_tensor(embeddings))
    same = labels[:, None] == labels[None, :]
    d = dist.data
    hard_pos = np.where(same, d, -np.inf).argmax(axis=1)
    hard_neg = np.where(same, np.inf, d).argmin(axis=1)
    rows = np.arange(len(labels))
    d_ap = dist[rows, hard_pos]
    d_an = dist[rows, hard_neg]
    return T.mean(T.relu(d_ap - d_an + margin))


@dataclass
class LossReport:
    ce: float
    triplet: float
    d2a: float
    a2d: float
    mse: float
    total: float
    weights: tuple[float, float]
    tensor: Tensor | None = None

    def as_dict(self) -> dict[str, float]:
        return {"ce": self.ce, "triplet": self.triplet, "d2a": self.d2a, "a2d": self.a2d,
                "mse": self.mse, "total": self.total}


def total_loss(ce, triplet, d2a, a2d, mse, alpha: float = 0.2, beta: float = 0.2) -> LossReport:
    """L = ce + triplet + alpha * (d2a + a2d) + beta * mse."""
    parts = [T.as_tensor(x) for x in (ce, triplet, d2a, a2d, mse)]
    ce_t, tri_t, d2a_t, a2d_t, mse_t = parts
    total = ce_t + tri_t + (d2a_t + a2d_t) * alpha + mse_t * beta
    vals = [p.item() for p in parts]
    return LossReport(*vals, total=total.item(), weights=(alpha, beta), tensor=total)
