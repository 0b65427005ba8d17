"""Run configuration: every module knob plus training settings, JSON round-trippable."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

# keys that may change between a checkpoint and a resumed run
RESUMABLE_KEYS = frozenset({"epochs", "data", "out", "save_every"})


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model size
    dim: int = 32
    heads: int = 4
    # selective interaction
    use_sim: bool = True
    k1: int | None = None          # None -> round(80/128 * L)
    k2: int | None = None          # None -> k1
    mask_mode: str = "union"
    drop_mode: str = "zero"
    # global alignment
    gam_anchor: str = "R"
    gam_tau_init: float = 0.07
    gam_pool_source: str = "original"
    alpha: float = 0.2
    # local alignment
    lam_r: int = 1
    lam_delta_max: float | None = None
    offset_sharing: bool = False
    lam_pairs: str = "all"
    beta: float = 0.2
    # identity losses
    ce_epsilon: float = 0.1
    tri_margin: float = 0.3
    # optimisation
    epochs: int = 50
    batch_size: int = 16
    samples_per_id: int = 4
    lr: float = 3.5e-4
    encoder_lr: float = 5e-6
    encoder_lr_factor: float = 100.0
    seed: int = 0
    # evaluation
    eval_feature: str = "frnt"
    metric: str = "euclidean"
    # io
    data: str | None = None
    out: str | None = None
    save_every: int = 0

    def __post_init__(self):
        if self.batch_size % self.samples_per_id:
            raise ConfigError(f"batch_size {self.batch_size} is not a multiple of "
                              f"samples_per_id {self.samples_per_id}")
        if self.batch_size // self.samples_per_id < 2:
            raise ConfigError("a batch needs at least two identities")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        choices = {"mask_mode": ("union", "intersection"), "drop_mode": ("zero", "gather"),
                   "gam_anchor": ("R", "N", "T"), "gam_pool_source": ("original", "selected"),
                   "lam_pairs": ("all", "to_anchor"), "eval_feature": ("frnt", "frnt+cls", "cls"),
                   "metric": ("euclidean", "cosine")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.gam_tau_init <= 0:
            raise ConfigError("gam_tau_init must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")

    @property
    def effective_encoder_lr(self) -> float:
        return self.encoder_lr * self.encoder_lr_factor

    def resolve_k(self, num_patches: int) -> tuple[int, int]:
        k1 = self.k1 if self.k1 is not None else max(1, round(80 / 128 * num_patches))
        k2 = self.k2 if self.k2 is not None else k1
        if not (1 <= k1 <= num_patches and 1 <= k2 <= num_patches):
            raise ConfigError(f"k1={k1}, k2={k2} must lie in [1, {num_patches}]")
        return k1, k2

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def snapshot(self) -> dict:
        return {k: v for k, v in self.to_json().items() if k not in RESUMABLE_KEYS}

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_json(data)


# module ablation ladder: baseline, +SIM, +SIM+GAM, all
ABLATION_PRESETS = {
    "baseline": {"use_sim": False, "alpha": 0.0, "beta": 0.0, "eval_feature": "cls"},
    "+SIM": {"use_sim": True, "alpha": 0.0, "beta": 0.0},
    "+SIM+GAM": {"use_sim": True, "beta": 0.0},
    "full": {"use_sim": True},
}
