"""Deterministic binary checkpoints: float64 tensors behind a sorted JSON header.

Layout: ``b"SGCK"``, u32 format version, u64 header length, UTF-8 JSON header
(tensor index, config snapshot, epoch, RNG and optimizer counters), then the
little-endian float64 payload in index order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import SignalModel
from .optim import Adam

MAGIC = b"SGCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    rng_state: dict
    meta: dict
    tensors: dict[str, np.ndarray]
    adam: dict  # group -> {"step": int, "lr": float}


def encode_checkpoint(model: SignalModel, opt: Adam, epoch: int, rng: np.random.Generator,
                      meta: dict) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = [(f"param.{n}", p.data) for n, p in model.named_parameters()]
    adam = {}
    for group, params in opt.params.items():
        st = opt.states[group]
        adam[group] = {"step": st.step, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}
        names = [n for n, p in model.parameter_groups()[group]]
        for i, name in enumerate(names):
            if st.m:
                tensors.append((f"adam.{group}.m.{name}", st.m[i]))
                tensors.append((f"adam.{group}.v.{name}", st.v[i]))
    index, offset, blobs = [], 0, []
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = {"version": FORMAT_VERSION, "config": model.config.to_json(), "epoch": epoch,
              "rng_state": rng.bit_generator.state, "meta": meta, "adam": adam, "tensors": index}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def decode_checkpoint(buf: bytes, path="<bytes>") -> Checkpoint:
    if buf[:4] != MAGIC or len(buf) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", buf[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        if start + 8 * count > len(buf):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8", count=count, offset=start) \
            .astype(np.float64).reshape(entry["shape"])
    return Checkpoint(header["config"], header["epoch"], header["rng_state"], header["meta"],
                      tensors, header["adam"])


def save_checkpoint(path, model, opt, epoch, rng, meta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, opt, epoch, rng, meta))
    return path


def load_checkpoint(path, expected: RunConfig | None = None) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode_checkpoint(buf, path)
    if expected is not None:
        stored = RunConfig.from_json(ckpt.config).snapshot()
        if stored != expected.snapshot():
            diff = sorted(k for k in stored if stored[k] != expected.snapshot().get(k))
            raise CheckpointError(f"{path}: config snapshot differs in {diff}")
    return ckpt


def restore(ckpt: Checkpoint, config: RunConfig | None = None):
    """Rebuild ``(model, optimizer, rng)`` from a checkpoint."""
    from .train import build_optimizer

    config = config or RunConfig.from_json(ckpt.config)
    meta = ckpt.meta
    rng = np.random.default_rng(0)
    model = SignalModel.init(config, tuple(meta["grid"]), meta["d_raw"], meta["num_classes"], rng)
    for name, p in model.named_parameters():
        key = f"param.{name}"
        if key not in ckpt.tensors or ckpt.tensors[key].shape != p.shape:
            raise CheckpointError(f"checkpoint lacks a matching tensor for {name}")
        p.data = ckpt.tensors[key].copy()
    opt = build_optimizer(model)
    groups = model.parameter_groups()
    for group, st in opt.states.items():
        info = ckpt.adam[group]
        st.step, st.lr = info["step"], info["lr"]
        st.beta1, st.beta2, st.eps = info["beta1"], info["beta2"], info["eps"]
        names = [n for n, _ in groups[group]]
        if f"adam.{group}.m.{names[0]}" in ckpt.tensors:
            st.m = [ckpt.tensors[f"adam.{group}.m.{n}"].copy() for n in names]
            st.v = [ckpt.tensors[f"adam.{group}.v.{n}"].copy() for n in names]
    rng.bit_generator.state = ckpt.rng_state
    return model, opt, rng
