"""Training loop, P x K sampling, evaluation and the module ablation ladder."""

from __future__ import annotations

import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import reid_eval
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .config import ABLATION_PRESETS, ConfigError, RunConfig
from .model import SignalModel, batch_tokens, compute_losses, embed, forward_pass
from .optim import Adam
from .synthdata import load_dataset
from .tensor import backward

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainResult:
    model: SignalModel
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def build_optimizer(model: SignalModel) -> Adam:
    c = model.config
    groups = model.parameter_groups()
    return Adam({"encoder": ([p for _, p in groups["encoder"]], c.effective_encoder_lr),
                 "module": ([p for _, p in groups["module"]], c.lr)})


def pk_batches(labels, per_batch_ids: int, per_id: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Identity-balanced batches of P identities x K samples, without replacement."""
    labels = np.asarray(labels)
    chunks: dict[int, list[np.ndarray]] = {}
    for lab in sorted(set(labels.tolist())):
        idx = rng.permutation(np.flatnonzero(labels == lab))
        chunks[lab] = [idx[i:i + per_id] for i in range(0, len(idx) - per_id + 1, per_id)]
    batches = []
    while True:
        avail = [lab for lab in sorted(chunks) if chunks[lab]]
        if len(avail) < per_batch_ids:
            return batches
        chosen = rng.choice(avail, size=per_batch_ids, replace=False)
        batches.append(np.concatenate([chunks[int(lab)].pop(0) for lab in chosen]))


def split_records(records) -> dict[str, list]:
    out = {"train": [], "query": [], "gallery": []}
    for r in records:
        out.setdefault(r.split, []).append(r)
    return out


def _records_for(config: RunConfig, records):
    if records is not None:
        return records
    if not config.data:
        raise ConfigError("no dataset: set 'data' in the config or pass --data")
    return load_dataset(config.data)


def _emit(line: dict, sink: Callable[[str], None] | None, logfile) -> None:
    text = json.dumps(line, sort_keys=True)
    if sink is not None:
        sink(text)
    if logfile is not None:
        logfile.write(text + "\n")
        logfile.flush()


def train(config: RunConfig, records=None, resume=None,
          sink: Callable[[str], None] | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs (continuing from ``resume`` if given)."""
    splits = split_records(_records_for(config, records))
    train_recs = splits["train"]
    if not train_recs:
        raise ConfigError("dataset has no train split")
    classes = sorted({r.label for r in train_recs})
    label_map = {lab: i for i, lab in enumerate(classes)}
    labels = np.array([label_map[r.label] for r in train_recs])
    grid = train_recs[0].grids["R"].shape[:2]
    d_raw = train_recs[0].grids["R"].shape[2]
    meta = {"grid": list(grid), "d_raw": int(d_raw), "num_classes": len(classes),
            "classes": [int(c) for c in classes]}
    config.resolve_k(grid[0] * grid[1])
    K = config.samples_per_id
    P = config.batch_size // K

    if resume is not None:
        ckpt = load_checkpoint(resume, expected=config)
        if ckpt.meta != meta:
            raise ConfigError(f"checkpoint {resume} was trained on a different dataset layout")
        model, opt, rng = restore(ckpt, config)
        start = ckpt.epoch
    else:
        rng = np.random.default_rng(config.seed)
        model = SignalModel.init(config, tuple(grid), int(d_raw), len(classes), rng)
        opt = build_optimizer(model)
        start = 0

    out_dir = Path(config.out) if config.out else None
    logfile = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_json(), indent=2), encoding="utf-8")
        logfile = open(out_dir / "metrics.jsonl", "a", encoding="utf-8")
    result = TrainResult(model)
    try:
        for epoch in range(start + 1, config.epochs + 1):
            t0 = time.perf_counter()
            sums = {k: 0.0 for k in ("ce", "triplet", "d2a", "a2d", "mse", "total")}
            batches = pk_batches(labels, P, K, rng)
            if not batches:
                raise ConfigError(f"train split cannot fill one {P}x{K} batch")
            for idx in batches:
                opt.zero_grad()
                batch = [train_recs[i] for i in idx]
                out = forward_pass(model, batch_tokens(batch))
                report = compute_losses(model, out, labels[idx])
                if not math.isfinite(report.total):
                    raise NumericError(f"non-finite loss at epoch {epoch}: {report.as_dict()}")
                backward(report.tensor)
                opt.step()
                for k, v in report.as_dict().items():
                    sums[k] += v
            line = {"epoch": epoch, "steps": len(batches),
                    **{k: v / len(batches) for k, v in sums.items()},
                    "tau": math.exp(model.log_tau.item()),
                    "seconds": round(time.perf_counter() - t0, 3)}
            result.history.append(line)
            _emit(line, sink, logfile)
            if out_dir is not None:
                result.checkpoint = save_checkpoint(out_dir / "last.ckpt", model, opt, epoch, rng, meta)
                if config.save_every and epoch % config.save_every == 0:
                    save_checkpoint(out_dir / f"epoch_{epoch:03d}.ckpt", model, opt, epoch, rng, meta)
    finally:
        if logfile is not None:
            logfile.close()
    return result


def evaluate_model(model: SignalModel, records, which: str | None = None) -> reid_eval.RetrievalReport:
    splits = split_records(records)
    query, gallery = splits["query"], splits["gallery"]
    if not query or not gallery:
        raise ConfigError("dataset needs non-empty query and gallery splits")
    qf = embed(model, query, which)
    gf = embed(model, gallery, which)
    dist = reid_eval.distance_matrix(qf, gf, model.config.metric)
    return reid_eval.evaluate(dist, [r.label for r in query], [r.label for r in gallery])


def untrained_model(config: RunConfig, records) -> SignalModel:
    train_recs = split_records(records)["train"]
    g = train_recs[0].grids["R"]
    classes = {r.label for r in train_recs}
    return SignalModel.init(config, g.shape[:2], g.shape[2], len(classes),
                            np.random.default_rng(config.seed))


def evaluate_cmd(checkpoint, data, out=None) -> reid_eval.RetrievalReport:
    ckpt = load_checkpoint(checkpoint)
    model, _, _ = restore(ckpt)
    report = evaluate_model(model, load_dataset(data))
    if out is not None:
        Path(out).write_text(report.dumps(), encoding="utf-8")
    return report


def ablate(config: RunConfig, records=None, sink: Callable[[str], None] | None = None) -> list[dict]:
    """Train and evaluate the baseline -> +SIM -> +SIM+GAM -> full ladder on one dataset."""
    records = _records_for(config, records)
    rows = []
    for name, overrides in ABLATION_PRESETS.items():
        cfg = config.replace(**overrides,
                             out=str(Path(config.out) / name) if config.out else None)
        res = train(cfg, records)
        feats = ("cls",) if not cfg.use_sim else ("frnt", "frnt+cls")
        for which in feats:
            rep = evaluate_model(res.model, records, which)
            row = {"model": name, "feature": which, "mAP": rep.mAP,
                   "R1": rep.rank(1), "R5": rep.rank(5), "R10": rep.rank(10),
                   "final_loss": res.history[-1]["total"] if res.history else None}
            rows.append(row)
            if sink is not None:
                sink(json.dumps(row, sort_keys=True))
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'model':<10} {'feature':<9} {'mAP':>6} {'R-1':>6} {'R-5':>6} {'R-10':>6}"]
    for r in rows:
        lines.append(f"{r['model']:<10} {r['feature']:<9} {100 * r['mAP']:6.1f} {100 * r['R1']:6.1f} "
                     f"{100 * r['R5']:6.1f} {100 * r['R10']:6.1f}")
    return "\n".join(lines)
