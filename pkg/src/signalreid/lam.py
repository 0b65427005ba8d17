"""Local alignment: reference grids, learned sampling offsets, deformable resampling, MSE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ParamSet, glorot, linear, param
from .tensor import DimensionError, Tensor


@dataclass
class ReferenceGrid:
    shape: tuple[int, int]
    points: Tensor  # [Hg, Wg, 2], (row, col) in [-1, 1]


@dataclass
class OffsetField:
    modality: str
    deltas: Tensor  # [..., Hg, Wg, 2]


def _axis(n: int) -> np.ndarray:
    return np.zeros(1) if n == 1 else np.linspace(-1.0, 1.0, n)


def make_reference_grid(h: int, w: int, r: int = 1) -> ReferenceGrid:
    if r < 1 or h % r or w % r:
        raise ValueError(f"down-sample factor {r} must divide the {h}x{w} patch grid")
    hg, wg = h // r, w // r
    rows, cols = np.meshgrid(_axis(hg), _axis(wg), indexing="ij")
    return ReferenceGrid((hg, wg), Tensor(np.stack([rows, cols], axis=-1)))


@dataclass
class OffsetNetParams(ParamSet):
    proj: Tensor       # [D, D]
    proj_bias: Tensor  # [D]
    conv1: Tensor      # [3, 3, D, D/2]
    conv1_bias: Tensor
    conv2: Tensor      # [3, 3, D/2, 2]
    conv2_bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, out_scale: float = 0.1) -> "OffsetNetParams":
        hid = max(dim // 2, 1)
        return cls(
            proj=glorot(rng, dim, dim),
            proj_bias=param(np.zeros(dim)),
            conv1=glorot(rng, 9 * dim, hid, 3, 3, dim, hid),
            conv1_bias=param(np.zeros(hid)),
            # small last layer: training starts near the reference grid
            conv2=param(rng.normal(0.0, out_scale / np.sqrt(9 * hid), (3, 3, hid, 2))),
            conv2_bias=param(np.zeros(2)),
        )


def default_delta_max(grid_shape: tuple[int, int]) -> float:
    return 2.0 / max(grid_shape)


def predict_offsets(patches: Tensor, grid: tuple[int, int], params: OffsetNetParams,
                    r: int = 1, delta_max: float | None = None, modality: str = "R") -> OffsetField:
    """Offsets ``[..., H/r, W/r, 2]`` bounded to ``[-delta_max, delta_max]`` via tanh."""
    h, w = grid
    L, D = patches.shape[-2:]
    if h * w != L:
        raise DimensionError(f"grid {grid} does not match {L} patches")
    if params.proj.shape[0] != D:
        raise DimensionError(f"offset net expects dim {params.proj.shape[0]}, got {D}")
    if delta_max is None:
        delta_max = default_delta_max((h // r, w // r))
    fmap = T.reshape(patches, patches.shape[:-2] + (h, w, D))
    x = linear(fmap, params.proj, params.proj_bias)
    x = T.gelu(T.conv3x3(x, params.conv1, params.conv1_bias, stride=r))
    x = T.conv3x3(x, params.conv2, params.conv2_bias, stride=1)
    return OffsetField(modality, T.tanh(x) * delta_max)


def deform_sample(patches: Tensor, grid_hw: tuple[int, int], ref: ReferenceGrid,
                  offsets: OffsetField | Tensor | None) -> Tensor:
    """Bilinearly resample the patch map at reference points plus offsets -> ``[..., G, D]``."""
    h, w = grid_hw
    L, D = patches.shape[-2:]
    if h * w != L:
        raise DimensionError(f"grid {grid_hw} does not match {L} patches")
    lead = patches.shape[:-2]
    fmap = T.reshape(patches, lead + (h, w, D))
    hg, wg = ref.shape
    pts = ref.points
    if offsets is not None:
        delta = offsets.deltas if isinstance(offsets, OffsetField) else offsets
        pts = T.add(pts, delta)
    if pts.shape[:-3] != lead:
        pts = T.broadcast_to(pts, lead + (hg, wg, 2))
    pts = T.reshape(pts, lead + (hg * wg, 2))
    return T.bilinear_sample(fmap, pts)


def _mse(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return T.mean(d * d)


def local_align_loss(r: Tensor, n: Tensor, t: Tensor, pairs: str = "all", anchor: str = "R") -> Tensor:
    """Cross-modal MSE between sampled features.

    ``pairs="all"`` averages the three unordered pairs; ``"to_anchor"``
    averages the two pairs that involve ``anchor``.
    """
    feats = {"R": T.as_tensor(r), "N": T.as_tensor(n), "T": T.as_tensor(t)}
    if len({f.shape for f in feats.values()}) != 1:
        raise ValueError(f"sampled feature shapes differ: {[f.shape for f in feats.values()]}")
    if pairs == "all":
        combos = [("R", "N"), ("R", "T"), ("N", "T")]
    elif pairs == "to_anchor":
        combos = [(anchor, m) for m in ("R", "N", "T") if m != anchor]
    else:
        raise ValueError(f"lam_pairs must be 'all' or 'to_anchor', got {pairs!r}")
    total = _mse(feats[combos[0][0]], feats[combos[0][1]])
    for a, b in combos[1:]:
        total = total + _mse(feats[a], feats[b])
    return total * (1.0 / len(combos))


@dataclass
class LocalAlignment:
    """Per-modality offset nets (or one shared net) plus the sampling configuration."""

    nets: dict[str, OffsetNetParams]
    grid_hw: tuple[int, int]
    r: int = 1
    delta_max: float | None = None
    sharing: bool = False
    ref: ReferenceGrid = field(init=False)

    def __post_init__(self):
        self.ref = make_reference_grid(*self.grid_hw, self.r)
        if self.delta_max is None:
            self.delta_max = default_delta_max(self.ref.shape)

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, grid_hw: tuple[int, int], r: int = 1,
             delta_max: float | None = None, sharing: bool = False) -> "LocalAlignment":
        keys = ("shared",) if sharing else ("R", "N", "T")
        nets = {k: OffsetNetParams.init(rng, dim) for k in keys}
        return cls(nets, grid_hw, r, delta_max, sharing)

    def net(self, modality: str) -> OffsetNetParams:
        return self.nets["shared" if self.sharing else modality]

    def sample(self, patches: Tensor, modality: str) -> tuple[Tensor, OffsetField]:
        off = predict_offsets(patches, self.grid_hw, self.net(modality), self.r, self.delta_max, modality)
        return deform_sample(patches, self.grid_hw, self.ref, off), off
