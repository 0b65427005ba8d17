"""Seeded tri-modal synthetic ReID data with background clutter and cross-modal shift."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sgt

MODALITIES = ("R", "N", "T")
MANIFEST_FORMAT = "signalreid-synth/1"


def foreground_block(grid: tuple[int, int], fg_fraction: float) -> tuple[int, int, int, int]:
    """(top, left, height, width) of the centered foreground rectangle."""
    H, W = grid
    n = int(round(fg_fraction * H * W))
    if n < 1:
        raise ValueError(f"fg_fraction {fg_fraction} leaves no foreground on a {H}x{W} grid")
    for w in range(min(W, n), 0, -1):
        if n % w == 0 and n // w <= H:
            h = n // w
            return (H - h) // 2, (W - w) // 2, h, w
    raise ValueError(f"{n} foreground patches do not form a rectangle inside a {H}x{W} grid")


@dataclass
class SynthConfig:
    num_ids: int = 10
    samples_per_id: int = 8
    query_per_id: int = 2
    gallery_per_id: int = 4
    grid: tuple[int, int] = (8, 4)
    d_raw: int = 16
    fg_fraction: float = 0.5
    bg_sigma: float = 0.3
    fg_noise: float = 0.1
    # per-sample appearance drift shared by all foreground cells, confined to a
    # fixed subspace of the latent space
    nuisance_dim: int = 4
    nuisance_scale: float = 1.5
    shifts: dict[str, tuple[int, int]] = field(
        default_factory=lambda: {"R": (0, 0), "N": (1, 0), "T": (0, 1)})
    mixing: dict[str, list] | None = None
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(v) for v in self.grid)
        self.shifts = {m: tuple(int(v) for v in self.shifts.get(m, (0, 0))) for m in MODALITIES}
        if self.num_ids < 2:
            raise ValueError("need at least two identities")
        if not 0.0 < self.fg_fraction <= 1.0:
            raise ValueError(f"fg_fraction must lie in (0, 1], got {self.fg_fraction}")
        if not 0 <= self.nuisance_dim < self.d_raw:
            raise ValueError("nuisance_dim must be smaller than d_raw")
        foreground_block(self.grid, self.fg_fraction)

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"] = list(self.grid)
        d["shifts"] = {m: list(v) for m, v in self.shifts.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known - {"preset"}
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        base = PRESETS[d.get("preset", "easy")]
        merged = {**base.to_json(), **{k: v for k, v in d.items() if k != "preset"}}
        return cls(**merged)


PRESETS = {
    "easy": SynthConfig(),
    "hard": SynthConfig(bg_sigma=1.0, shifts={"R": (0, 0), "N": (2, 0), "T": (0, 2)}),
}


@dataclass
class SampleRecord:
    sample_id: int
    label: int
    split: str
    grids: dict[str, np.ndarray]  # modality -> [H, W, D_raw]
    mask: np.ndarray              # [L] foreground mask in the unshifted frame
    shifts: dict[str, tuple[int, int]]

    def tokens(self, modality: str) -> np.ndarray:
        g = self.grids[modality]
        return g.reshape(-1, g.shape[-1])


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def generate(config: SynthConfig) -> dict[str, list[SampleRecord]]:
    """Build train/query/gallery splits; identical config and seed give identical arrays."""
    rng = np.random.default_rng(config.seed)
    H, W = config.grid
    D = config.d_raw
    top, left, h, w = foreground_block(config.grid, config.fg_fraction)
    n_fg = h * w
    mask2d = np.zeros((H, W))
    mask2d[top:top + h, left:left + w] = 1.0

    if config.mixing is not None:
        mixing = {m: np.asarray(config.mixing[m], dtype=np.float64) for m in MODALITIES}
    else:
        mixing = {m: _orthogonal(rng, D) for m in MODALITIES}
    basis = _orthogonal(rng, D)
    nuis_basis = basis[:, :config.nuisance_dim]
    id_basis = basis[:, config.nuisance_dim:]
    latents = [rng.normal(size=(n_fg, D - config.nuisance_dim)) @ id_basis.T
               for _ in range(config.num_ids)]

    splits = {"train": [], "query": [], "gallery": []}
    counts = {"train": config.samples_per_id, "query": config.query_per_id,
              "gallery": config.gallery_per_id}
    sid = 0
    for split in ("train", "query", "gallery"):
        for label in range(config.num_ids):
            for _ in range(counts[split]):
                nuis = config.nuisance_scale * (nuis_basis @ rng.normal(size=config.nuisance_dim))
                content = latents[label] + nuis
                grids = {}
                for m in MODALITIES:
                    img = config.bg_sigma * rng.normal(size=(H, W, D))
                    fg = content @ mixing[m].T + config.fg_noise * rng.normal(size=(n_fg, D))
                    img[top:top + h, left:left + w] = fg.reshape(h, w, D)
                    dy, dx = config.shifts[m]
                    grids[m] = np.roll(img, (dy, dx), axis=(0, 1))
                splits[split].append(SampleRecord(sid, label, split, grids, mask2d.reshape(-1).copy(),
                                                  dict(config.shifts)))
                sid += 1
    return splits


def save_dataset(records, directory, config: SynthConfig | None = None) -> Path:
    """Write one SGT1 file per tensor plus ``manifest.json``; returns the manifest path."""
    out = Path(directory)
    if isinstance(records, dict):
        records = [r for split in ("train", "query", "gallery") for r in records.get(split, [])]
    try:
        out.mkdir(parents=True, exist_ok=True)
        samples = []
        for rec in records:
            stem = f"{rec.split}_{rec.sample_id:05d}"
            paths = {}
            for m in MODALITIES:
                paths[m] = f"{stem}_{m}.sgt"
                sgt.save(out / paths[m], rec.grids[m])
            mask_path = f"{stem}_mask.sgt"
            sgt.save(out / mask_path, rec.mask)
            samples.append({"id": rec.sample_id, "label": rec.label, "split": rec.split,
                            "paths": paths, "mask": mask_path,
                            "shift": {m: list(rec.shifts[m]) for m in MODALITIES}})
        manifest = {"format": MANIFEST_FORMAT,
                    "config": None if config is None else config.to_json(),
                    "samples": samples}
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    return path


def load_dataset(manifest_path) -> list[SampleRecord]:
    """Read every record named in the manifest; any bad file aborts the whole load."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    root = path.parent
    records = []
    for s in manifest["samples"]:
        grids = {m: sgt.load(root / s["paths"][m]) for m in MODALITIES}
        mask = sgt.load(root / s["mask"])
        shapes = {g.shape for g in grids.values()}
        if len(shapes) != 1 or grids["R"].ndim != 3 or mask.shape != (grids["R"].shape[0] * grids["R"].shape[1],):
            raise ValueError(f"sample {s['id']} in {path}: inconsistent tensor shapes")
        records.append(SampleRecord(int(s["id"]), int(s["label"]), s["split"], grids, mask,
                                    {m: tuple(s["shift"][m]) for m in MODALITIES}))
    return records


def load_manifest_config(manifest_path) -> SynthConfig | None:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    cfg = json.loads(path.read_text(encoding="utf-8")).get("config")
    return None if cfg is None else SynthConfig.from_json(cfg)
