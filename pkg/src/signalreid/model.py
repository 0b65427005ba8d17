"""Full model: toy tri-modal encoder, selective interaction, global and local alignment, heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import gam, lam, losses, sim
from . import tensor as T
from .config import RunConfig
from .nn import ParamSet, glorot, linear, param
from .sim import MODALITIES, InteractionParams, ModalityFeatures
from .tensor import DimensionError, Tensor


@dataclass
class EncoderParams(ParamSet):
    """One modality's encoder: patch projection and a CLS cross-attention pooling block.

    ``pos`` enters only the pooling keys, so the patch tokens themselves stay a
    pure linear function of the raw input.
    """

    proj: Tensor       # [D_raw, D]
    proj_bias: Tensor  # [D]
    pos: Tensor        # [L, D]
    cls_seed: Tensor   # [D]
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_raw: int, dim: int, num_patches: int) -> "EncoderParams":
        return cls(
            proj=glorot(rng, d_raw, dim),
            proj_bias=param(np.zeros(dim)),
            pos=param(rng.normal(0.0, 0.5, (num_patches, dim))),
            cls_seed=param(rng.normal(0.0, 1.0, dim)),
            wq=glorot(rng, dim, dim),
            wk=glorot(rng, dim, dim),
            wv=glorot(rng, dim, dim),
            wo=glorot(rng, dim, dim),
            ln_gain=param(np.ones(dim)),
            ln_bias=param(np.zeros(dim)),
        )


def encode_modality(raw, modality: str, params: EncoderParams, grid: tuple[int, int]) -> ModalityFeatures:
    """Raw tokens ``[..., L, D_raw]`` -> class token ``[..., D]`` and patch tokens ``[..., L, D]``."""
    raw = T.as_tensor(raw)
    d_raw, dim = params.proj.shape
    L = params.pos.shape[0]
    if raw.shape[-2:] != (L, d_raw):
        raise DimensionError(f"{modality}: raw tokens {raw.shape} do not match [..., {L}, {d_raw}]")
    patches = linear(raw, params.proj, params.proj_bias)
    lead = raw.shape[:-2]
    q = T.matmul(T.reshape(params.cls_seed, (1, dim)), params.wq)
    k = linear(patches + params.pos, params.wk)
    v = linear(patches, params.wv)
    attn = T.softmax_lastdim(T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dim)))  # [..., 1, L]
    pooled = T.reshape(linear(T.matmul(attn, v), params.wo), lead + (dim,))
    cls = T.layer_norm(pooled + params.cls_seed, params.ln_gain, params.ln_bias)
    return ModalityFeatures(modality, cls, patches, grid)


@dataclass
class SignalModel(ParamSet):
    encoders: dict[str, EncoderParams]
    interaction: InteractionParams
    log_tau: Tensor
    lam_nets: dict[str, lam.OffsetNetParams]
    head: Tensor  # [3D, C], no bias
    config: RunConfig = field(metadata={"param": False})
    grid: tuple[int, int] = (8, 4)
    d_raw: int = 16

    @classmethod
    def init(cls, config: RunConfig, grid: tuple[int, int], d_raw: int, num_classes: int,
             rng: np.random.Generator) -> "SignalModel":
        D = config.dim
        L = grid[0] * grid[1]
        encoders = {m: EncoderParams.init(rng, d_raw, D, L) for m in MODALITIES}
        interaction = InteractionParams.init(rng, D, config.heads)
        align = lam.LocalAlignment.init(rng, D, grid, config.lam_r, config.lam_delta_max,
                                        config.offset_sharing)
        head = param(rng.normal(0.0, 0.01, (3 * D, num_classes)))
        return cls(encoders, interaction, gam.init_log_tau(config.gam_tau_init), align.nets,
                   head, config, tuple(grid), d_raw)

    @property
    def alignment(self) -> lam.LocalAlignment:
        c = self.config
        return lam.LocalAlignment(self.lam_nets, self.grid, c.lam_r, c.lam_delta_max, c.offset_sharing)

    def parameter_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        named = list(self.named_parameters())
        return {"encoder": [(n, p) for n, p in named if n.startswith("encoders.")],
                "module": [(n, p) for n, p in named if not n.startswith("encoders.")]}


@dataclass
class ForwardOutput:
    feature: Tensor              # [B, 3D] retrieval / identity feature
    cls_concat: Tensor           # [B, 3D]
    logits: Tensor
    embeddings: dict[str, Tensor]  # unit GAM vectors per modality, [B, D]
    sampled: dict[str, Tensor]     # LAM-resampled features per modality
    masks: dict[str, sim.SelectionMask] | None


def batch_tokens(records) -> dict[str, np.ndarray]:
    return {m: np.stack([r.tokens(m) for r in records]) for m in MODALITIES}


def forward_pass(model: SignalModel, raw: dict[str, np.ndarray]) -> ForwardOutput:
    """Encode the three modalities, then run SIM, GAM and LAM on the batch."""
    c = model.config
    feats = {m: encode_modality(raw[m], m, model.encoders[m], model.grid) for m in MODALITIES}
    r, n, t = (feats[m] for m in MODALITIES)
    cls_concat = T.concat([r.cls, n.cls, t.cls], axis=-1)
    masks = None
    if c.use_sim:
        k1, k2 = c.resolve_k(r.num_patches)
        feature, masks = sim.selective_interaction(r, n, t, model.interaction, k1, k2,
                                                   c.mask_mode, c.drop_mode)
    else:
        feature = cls_concat

    emb = {}
    for m in MODALITIES:
        src = feats[m].patches
        if c.gam_pool_source == "selected" and masks is not None:
            src = sim.apply_mask(src, masks[m].fused_mask)
        emb[m] = gam.pool_normalize(src, m).vector

    align = model.alignment
    sampled = {m: align.sample(feats[m].patches, m)[0] for m in MODALITIES}
    logits = T.matmul(feature, model.head)
    return ForwardOutput(feature, cls_concat, logits, emb, sampled, masks)


def compute_losses(model: SignalModel, out: ForwardOutput, labels) -> losses.LossReport:
    c = model.config
    ce = losses.label_smooth_ce(out.logits, labels, c.ce_epsilon)
    tri = losses.batch_hard_triplet(out.feature, labels, c.tri_margin)
    a, b, d = gam.order_by_anchor(out.embeddings, c.gam_anchor)
    d2a, a2d = gam.gram_contrastive_loss(a, b, d, model.log_tau)
    mse = lam.local_align_loss(out.sampled["R"], out.sampled["N"], out.sampled["T"],
                               c.lam_pairs, c.gam_anchor)
    return losses.total_loss(ce, tri, d2a, a2d, mse, c.alpha, c.beta)


def retrieval_feature(model: SignalModel, out: ForwardOutput, which: str | None = None) -> np.ndarray:
    which = which or model.config.eval_feature
    if which == "cls" or not model.config.use_sim:
        return out.cls_concat.data
    if which == "frnt":
        return out.feature.data
    return np.concatenate([out.feature.data, out.cls_concat.data], axis=-1)


def embed(model: SignalModel, records, which: str | None = None, chunk: int = 64) -> np.ndarray:
    feats = []
    with T.no_grad():
        for i in range(0, len(records), chunk):
            out = forward_pass(model, batch_tokens(records[i:i + chunk]))
            feats.append(retrieval_feature(model, out, which))
    return np.concatenate(feats, axis=0)
