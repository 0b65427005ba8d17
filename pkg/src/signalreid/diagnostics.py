"""Gradient-check table over every differentiable operation and the composite model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gam, lam, losses, sim
from . import tensor as T
from .config import RunConfig
from .gradcheck import finite_diff_check, packed
from .model import SignalModel, compute_losses, forward_pass
from .tensor import Tensor

TOLERANCE = 1e-4

# each case draws a fresh point: (rng) -> (f, x0)
Case = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _simple(op, shapes, point=None) -> Case:
    def case(rng):
        f, n = packed(op, shapes)
        x = rng.normal(size=n) if point is None else point(rng, n)
        return f, x
    return case


def _unit(v: Tensor) -> Tensor:
    return v / T.sqrt(T.sum_(v * v, axis=-1, keepdims=True))


def _gram_volume(x: Tensor) -> Tensor:
    return gam.gram_volume(x[0], x[1], x[2])


def _unit_rows(rng, n):
    v = rng.normal(size=(3, n // 3))
    return (v / np.linalg.norm(v, axis=1, keepdims=True)).reshape(-1)


def _ce(logits: Tensor) -> Tensor:
    return losses.label_smooth_ce(logits, [0, 2, 1, 2], 0.1)


def _triplet(emb: Tensor) -> Tensor:
    return losses.batch_hard_triplet(emb, [0, 0, 1, 1, 2, 2], 0.3)


def _gram_loss(which: int):
    def op(a, b, c):
        return gam.gram_contrastive_loss(_unit(a), _unit(b), _unit(c), T.as_tensor(np.log(0.5)))[which]
    return op


def _mhca_ffn_case(rng):
    D, L, h = 8, 3, 2
    fs = [sim.ModalityFeatures(m, Tensor(rng.normal(size=D)), Tensor(rng.normal(size=(L, D))), (L, 1))
          for m in sim.MODALITIES]
    params = sim.InteractionParams.init(rng, D, h)
    names = ("wq", "wk", "wv", "wo", "ffn_w1")
    shapes = [getattr(params, n).shape for n in names]
    mask = np.array([1.0, 0.0, 1.0])

    def op(*ws):
        for n, w in zip(names, ws):
            setattr(params, n, w)
        sel = tuple(sim.apply_mask(f.patches, mask) for f in fs)
        return sim.modal_interaction(*fs, sel, params)

    f, _ = packed(op, shapes)
    return f, np.concatenate([getattr(params, n).data.reshape(-1) for n in names])


def _deform_case(rng):
    D, grid = 4, (3, 2)
    net = lam.OffsetNetParams.init(rng, D, out_scale=2.0)
    ref = lam.make_reference_grid(*grid)
    shapes = [(6, D), net.conv2.shape]

    def op(patches, conv2):
        net.conv2 = conv2
        off = lam.predict_offsets(patches, grid, net, delta_max=0.6)
        return lam.deform_sample(patches, grid, ref, off)

    f, _ = packed(op, shapes)
    return f, np.concatenate([rng.normal(size=6 * D), net.conv2.data.reshape(-1)])


def tiny_model(seed: int = 0) -> tuple[SignalModel, dict[str, np.ndarray], np.ndarray]:
    rng = np.random.default_rng(seed)
    cfg = RunConfig(dim=4, heads=2, k1=2, k2=1, batch_size=4, samples_per_id=2, seed=seed)
    model = SignalModel.init(cfg, (2, 2), 3, 2, rng)
    raw = {m: rng.normal(size=(4, 4, 3)) for m in sim.MODALITIES}
    return model, raw, np.array([0, 0, 1, 1])


COMPOSITE_SLOTS = (("encoders.R", "proj"), ("interaction", "wo"), ("lam_nets.N", "conv2"),
                   ("", "head"), ("", "log_tau"))


def _slot_owner(model, path):
    obj = model
    for part in filter(None, path.split(".")):
        obj = obj[part] if isinstance(obj, dict) else getattr(obj, part)
    return obj


def _composite_case(rng):
    model, raw, labels = tiny_model(int(rng.integers(1 << 30)))
    owners = [(_slot_owner(model, p), a) for p, a in COMPOSITE_SLOTS]
    shapes = [getattr(o, a).shape for o, a in owners]

    def op(*ws):
        for (o, a), w in zip(owners, ws):
            setattr(o, a, w)
        return compute_losses(model, forward_pass(model, raw), labels).tensor

    f, _ = packed(op, shapes)
    return f, np.concatenate([getattr(o, a).data.reshape(-1) for o, a in owners])


REGISTRY: dict[str, Case] = {
    "matmul": _simple(T.matmul, [(3, 4), (4, 2)]),
    "softmax": _simple(T.softmax_lastdim, [(3, 5)]),
    "log_softmax": _simple(T.log_softmax_lastdim, [(2, 5)]),
    "layer_norm": _simple(T.layer_norm, [(3, 6), (6,), (6,)]),
    "gelu": _simple(T.gelu, [(6,)]),
    "det3": _simple(T.det3, [(3, 3)]),
    "gram_volume": _simple(_gram_volume, [(3, 5)], _unit_rows),
    "bilinear_sample": _simple(lambda f, p: T.bilinear_sample(f, T.tanh(p) * 0.95), [(3, 4, 2), (5, 2)]),
    "conv3x3": _simple(lambda x, w, b: T.conv3x3(x, w, b, stride=2), [(4, 4, 2), (3, 3, 2, 3), (3,)]),
    "deform_sample": _deform_case,
    "mhca_ffn": _mhca_ffn_case,
    "label_smooth_ce": _simple(_ce, [(4, 3)]),
    "batch_hard_triplet": _simple(_triplet, [(6, 3)]),
    "gram_d2a": _simple(_gram_loss(0), [(4, 3), (4, 3), (4, 3)]),
    "gram_a2d": _simple(_gram_loss(1), [(4, 3), (4, 3), (4, 3)]),
    "local_align_mse": _simple(lam.local_align_loss, [(4, 3), (4, 3), (4, 3)]),
    "composite_forward": _composite_case,
}


@dataclass
class GradcheckRow:
    op: str
    points: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_gradcheck(seed: int = 0, points: int = 20, registry: dict[str, Case] | None = None,
                  only: set[str] | None = None) -> list[GradcheckRow]:
    registry = REGISTRY if registry is None else registry
    rows = []
    for i, (name, case) in enumerate(registry.items()):
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(points):
            f, x = case(rng)
            err = finite_diff_check(f, x)
            worst = max(worst, err if np.isfinite(err) else np.inf)
        rows.append(GradcheckRow(name, points, worst, time.perf_counter() - t0))
    return rows


def format_rows(rows: list[GradcheckRow]) -> str:
    out = [f"{'op':<20} {'points':>6} {'max rel err':>12} {'secs':>6}  status"]
    for r in rows:
        out.append(f"{r.op:<20} {r.points:>6} {r.max_rel_error:12.3e} {r.seconds:6.2f}  "
                   f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(out)
