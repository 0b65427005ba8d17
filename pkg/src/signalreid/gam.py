"""Global alignment: pooled unit embeddings, Gram volume, and the gram contrastive losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

TRAIN_DET_FLOOR = 1e-12


class DegenerateInputError(ValueError):
    """Pooled feature has zero norm and cannot be normalized."""


@dataclass
class ModalEmbedding:
    modality: str
    vector: Tensor  # [..., D], unit L2 norm


def pool_normalize(patches: Tensor, modality: str = "R") -> ModalEmbedding:
    """Mean over the patch axis, then L2 normalization."""
    pooled = T.mean(patches, axis=-2)
    norm = T.sqrt(T.sum_(pooled * pooled, axis=-1, keepdims=True))
    if np.any(norm.data == 0.0):
        raise DegenerateInputError("mean patch feature is the zero vector")
    return ModalEmbedding(modality, pooled / norm)


def _vec(e) -> Tensor:
    return e.vector if isinstance(e, ModalEmbedding) else T.as_tensor(e)


def gram_matrix(r, n, t) -> Tensor:
    """G[i, j] = <v_i, v_j> for v = (R, N, T); broadcasts over leading dims."""
    a = T.stack([_vec(r), _vec(n), _vec(t)], axis=-2)
    return T.matmul(a, T.swap_last(a))


def gram_volume(r, n, t, floor: float | None = None) -> Tensor:
    """sqrt(det G).

    With ``floor=None`` the determinant is clamped at 0 (evaluation); training
    passes ``floor=TRAIN_DET_FLOOR`` so the square root keeps a finite slope.
    """
    det = T.det3(gram_matrix(r, n, t))
    det = T.clamp_min(det, 0.0 if floor is None else floor)
    if floor is None:
        # sqrt(0) has an infinite slope; route zero entries around the sqrt
        zero = det.data == 0.0
        if np.any(zero):
            safe = T.add(det, zero.astype(float))
            return T.mul(T.sqrt(safe), (~zero).astype(float))
    return T.sqrt(det)


@dataclass
class GramVolume:
    gram: Tensor
    volume: Tensor
    log_tau: Tensor

    @property
    def temperature(self) -> float:
        return math.exp(self.log_tau.item())


def init_log_tau(tau0: float = 0.07) -> Tensor:
    if tau0 <= 0:
        raise ValueError("temperature must be positive")
    return Tensor(math.log(tau0), requires_grad=True)


def pairwise_volumes(anchor: Tensor, m2: Tensor, m3: Tensor, floor: float | None = TRAIN_DET_FLOOR) -> Tensor:
    """V[i, j] = Vol(anchor_j, m2_i, m3_i) for batches of unit vectors ``[B, D]``."""
    B, D = anchor.shape
    a = T.broadcast_to(T.reshape(anchor, (1, B, D)), (B, B, D))
    b = T.broadcast_to(T.reshape(m2, (B, 1, D)), (B, B, D))
    c = T.broadcast_to(T.reshape(m3, (B, 1, D)), (B, B, D))
    return gram_volume(a, b, c, floor=floor)


def gram_contrastive_loss(anchor: Tensor, m2: Tensor, m3: Tensor, log_tau: Tensor,
                          floor: float | None = TRAIN_DET_FLOOR) -> tuple[Tensor, Tensor]:
    """Batch-wise (L_D2A, L_A2D) for anchor and the two remaining modalities, each ``[B, D]``.

    D2A contrasts each sample's non-anchor pair against every anchor in the
    batch; A2D contrasts each anchor against every non-anchor pair.
    """
    anchor, m2, m3 = T.as_tensor(anchor), T.as_tensor(m2), T.as_tensor(m3)
    if anchor.ndim != 2 or anchor.shape[0] == 0:
        raise ValueError(f"need a non-empty [B, D] batch, got {anchor.shape}")
    B = anchor.shape[0]
    vols = pairwise_volumes(anchor, m2, m3, floor)
    logits = -vols / T.exp(log_tau)
    diag = (np.arange(B), np.arange(B))
    d2a = -T.mean(T.log_softmax_lastdim(logits)[diag])
    a2d = -T.mean(T.log_softmax_lastdim(T.swap_last(logits))[diag])
    return d2a, a2d


def order_by_anchor(embeddings: dict[str, Tensor], anchor: str) -> tuple[Tensor, Tensor, Tensor]:
    """Anchor first, then the other two in R, N, T order."""
    rest = [m for m in ("R", "N", "T") if m != anchor]
    return embeddings[anchor], embeddings[rest[0]], embeddings[rest[1]]
