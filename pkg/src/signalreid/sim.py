"""Selective interaction: intra/inter-modal token selection and class-token fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ParamSet, glorot, linear, param
from .tensor import DimensionError, Tensor, top_k_indices

MODALITIES = ("R", "N", "T")
MASKED_LOGIT = -1e9


@dataclass
class ModalityFeatures:
    """One modality's class token ``cls[..., D]`` and patch tokens ``patches[..., L, D]``."""

    modality: str
    cls: Tensor
    patches: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        L, D = self.patches.shape[-2:]
        if L < 1 or D < 1:
            raise DimensionError(f"empty patch tokens {self.patches.shape}")
        if self.grid[0] * self.grid[1] != L:
            raise DimensionError(f"grid {self.grid} does not cover {L} patches")
        if self.cls.shape[-1] != D or self.cls.shape[:-1] != self.patches.shape[:-2]:
            raise DimensionError(f"cls {self.cls.shape} does not match patches {self.patches.shape}")

    @property
    def num_patches(self) -> int:
        return self.patches.shape[-2]

    @property
    def dim(self) -> int:
        return self.patches.shape[-1]


@dataclass
class SelectionMask:
    """Index sets and binary masks for one modality; leading dims follow the batch."""

    intra_indices: np.ndarray
    inter_indices: np.ndarray
    intra_mask: np.ndarray
    inter_mask: np.ndarray
    fused_mask: np.ndarray


@dataclass
class InteractionParams(ParamSet):
    stack_proj: Tensor
    concat_proj: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    heads: int = field(default=4, metadata={"param": False})

    def __post_init__(self):
        D = self.wq.shape[0]
        if D % self.heads:
            raise ValueError(f"embedding dim {D} not divisible by {self.heads} heads")

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, heads: int = 4) -> "InteractionParams":
        eye = np.eye(dim)
        return cls(
            stack_proj=param(eye + rng.normal(0, 0.02, (dim, dim))),
            concat_proj=param(eye + rng.normal(0, 0.02, (dim, dim))),
            wq=glorot(rng, dim, dim),
            wk=glorot(rng, dim, dim),
            wv=glorot(rng, dim, dim),
            wo=glorot(rng, dim, dim),
            ffn_w1=glorot(rng, dim, 4 * dim),
            ffn_b1=param(np.zeros(4 * dim)),
            ffn_w2=glorot(rng, 4 * dim, dim),
            ffn_b2=param(np.zeros(dim)),
            ln1_gain=param(np.ones(dim)),
            ln1_bias=param(np.zeros(dim)),
            ln2_gain=param(np.ones(dim)),
            ln2_bias=param(np.zeros(dim)),
            heads=heads,
        )


def _check_triplet(r: ModalityFeatures, n: ModalityFeatures, t: ModalityFeatures) -> None:
    shapes = {f.patches.shape for f in (r, n, t)}
    if len(shapes) != 1:
        raise ValueError(f"modalities disagree on patch shape: {sorted(shapes)}")


def _binary_mask(indices: np.ndarray, length: int) -> np.ndarray:
    mask = np.zeros(indices.shape[:-1] + (length,))
    np.put_along_axis(mask, indices, 1.0, axis=-1)
    return mask


def _batched_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    lead = scores.shape[:-1]
    flat = scores.reshape(-1, scores.shape[-1])
    out = np.stack([top_k_indices(row, k) for row in flat])
    return out.reshape(*lead, k)


def intra_modal_scores(feat: ModalityFeatures) -> Tensor:
    """softmax(cls . patches^T / sqrt(D)) with identity query/key maps -> ``[..., 1, L]``."""
    D = feat.dim
    q = T.reshape(feat.cls, feat.cls.shape[:-1] + (1, D))
    logits = T.matmul(q, T.swap_last(feat.patches)) * (1.0 / math.sqrt(D))
    return T.softmax_lastdim(logits)


def intra_select(scores: Tensor, k1: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k1`` patches by intra-modal score: ``(indices, mask)``."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    s = s.reshape(s.shape[:-2] + (s.shape[-1],)) if s.ndim >= 2 and s.shape[-2] == 1 else s
    L = s.shape[-1]
    if not 1 <= k1 <= L:
        raise ValueError(f"k1={k1} must lie in [1, {L}]")
    idx = _batched_top_k(s, k1)
    return idx, _binary_mask(idx, L)


def inter_modal_scores(r: ModalityFeatures, n: ModalityFeatures, t: ModalityFeatures,
                       params: InteractionParams) -> Tensor:
    """Cross attention of projected class tokens over all patches -> ``[..., 3, 3L]``.

    Rows are ordered (R, N, T); column blocks are R, N, T patches.
    """
    _check_triplet(r, n, t)
    D = r.dim
    q = linear(T.stack([r.cls, n.cls, t.cls], axis=-2), params.stack_proj)
    k = linear(T.concat([r.patches, n.patches, t.patches], axis=-2), params.concat_proj)
    return T.softmax_lastdim(T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(D)))


def cross_modal_relevance(S, m: str) -> np.ndarray:
    """Attention a modality's own patches receive from the other two class tokens.

    Sums the two rows u != m over modality m's column block.  The alternative
    reading (all 2L foreign columns) cannot be turned into a per-patch score
    for modality m, so it is not offered.
    """
    s = np.asarray(S.data if isinstance(S, Tensor) else S)
    i = MODALITIES.index(m)
    L = s.shape[-1] // 3
    block = s[..., :, i * L:(i + 1) * L]
    others = [u for u in range(3) if u != i]
    return block[..., others[0], :] + block[..., others[1], :]


def inter_select(S, m: str, k2: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k2`` patches of modality ``m`` by cross-modal relevance."""
    rel = cross_modal_relevance(S, m)
    L = rel.shape[-1]
    if not 1 <= k2 <= L:
        raise ValueError(f"k2={k2} must lie in [1, {L}]")
    idx = _batched_top_k(rel, k2)
    return idx, _binary_mask(idx, L)


def fuse_masks(intra_mask: np.ndarray, inter_mask: np.ndarray, mode: str = "union") -> np.ndarray:
    intra_mask, inter_mask = np.asarray(intra_mask), np.asarray(inter_mask)
    if intra_mask.shape != inter_mask.shape:
        raise ValueError(f"mask shapes differ: {intra_mask.shape} vs {inter_mask.shape}")
    if mode == "union":
        return np.maximum(intra_mask, inter_mask)
    if mode == "intersection":
        return np.minimum(intra_mask, inter_mask)
    raise ValueError(f"mask_mode must be 'union' or 'intersection', got {mode!r}")


def apply_mask(patches: Tensor, mask: np.ndarray) -> Tensor:
    """Zero the masked-out patch rows; shape is unchanged."""
    return T.mul(patches, np.asarray(mask)[..., None])


def select_tokens(r: ModalityFeatures, n: ModalityFeatures, t: ModalityFeatures,
                  params: InteractionParams, k1: int, k2: int,
                  mask_mode: str = "union") -> dict[str, SelectionMask]:
    """Run both selection stages for all three modalities (no gradient)."""
    with T.no_grad():
        S = inter_modal_scores(r, n, t, params)
        masks = {}
        for feat in (r, n, t):
            ia, ma = intra_select(intra_modal_scores(feat), k1)
            ie, me = inter_select(S, feat.modality, k2)
            masks[feat.modality] = SelectionMask(ia, ie, ma, me, fuse_masks(ma, me, mask_mode))
    return masks


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, D = x.shape
    x = T.reshape(x, (*lead, n, h, D // h))
    k = len(lead)
    axes = list(range(k)) + [k + 1, k, k + 2]
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    axes = list(range(k)) + [k + 1, k, k + 2]
    return T.reshape(T.transpose(x, axes), (*lead, n, h * dh))


def mhca(q: Tensor, kv: Tensor, params: InteractionParams,
         key_bias: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Multi-head cross attention; returns (output ``[..., n, D]``, weights ``[..., h, n, m]``)."""
    h = params.heads
    dh = q.shape[-1] // h
    qh = _split_heads(linear(q, params.wq), h)
    kh = _split_heads(linear(kv, params.wk), h)
    vh = _split_heads(linear(kv, params.wv), h)
    logits = T.matmul(qh, T.swap_last(kh)) * (1.0 / math.sqrt(dh))
    if key_bias is not None:
        logits = logits + np.asarray(key_bias)[..., None, None, :]
    attn = T.softmax_lastdim(logits)
    return linear(_merge_heads(T.matmul(attn, vh)), params.wo), attn


def feed_forward(x: Tensor, params: InteractionParams) -> Tensor:
    return linear(T.gelu(linear(x, params.ffn_w1, params.ffn_b1)), params.ffn_w2, params.ffn_b2)


def modal_interaction(r: ModalityFeatures, n: ModalityFeatures, t: ModalityFeatures,
                      selected: tuple[Tensor, Tensor, Tensor], params: InteractionParams,
                      key_mask: np.ndarray | None = None, return_attention: bool = False):
    """Fuse class tokens with the selected patches -> ``f_rnt[..., 3D]``.

    ``key_mask`` (``[..., 3L]``, 1 = keep) removes masked rows from the
    attention softmax entirely, which is equivalent to physically dropping them.
    """
    _check_triplet(r, n, t)
    q = linear(T.stack([r.cls, n.cls, t.cls], axis=-2), params.stack_proj)
    k = linear(T.concat(list(selected), axis=-2), params.concat_proj)
    bias = None if key_mask is None else np.where(np.asarray(key_mask) > 0, 0.0, MASKED_LOGIT)
    att, weights = mhca(q, k, params, bias)
    q1 = T.layer_norm(q + att, params.ln1_gain, params.ln1_bias)
    out = T.layer_norm(q1 + feed_forward(q1, params), params.ln2_gain, params.ln2_bias)
    f_rnt = T.reshape(out, out.shape[:-2] + (3 * out.shape[-1],))
    return (f_rnt, weights) if return_attention else f_rnt


def selective_interaction(r: ModalityFeatures, n: ModalityFeatures, t: ModalityFeatures,
                          params: InteractionParams, k1: int, k2: int, mask_mode: str = "union",
                          drop_mode: str = "zero") -> tuple[Tensor, dict[str, SelectionMask]]:
    """Selection followed by modal interaction; returns ``(f_rnt, masks)``."""
    if drop_mode not in ("zero", "gather"):
        raise ValueError(f"drop_mode must be 'zero' or 'gather', got {drop_mode!r}")
    masks = select_tokens(r, n, t, params, k1, k2, mask_mode)
    selected = tuple(apply_mask(f.patches, masks[f.modality].fused_mask) for f in (r, n, t))
    key_mask = None
    if drop_mode == "gather":
        key_mask = np.concatenate([masks[m].fused_mask for m in MODALITIES], axis=-1)
    return modal_interaction(r, n, t, selected, params, key_mask), masks
