"""Command-line entry point: gen-data, train, eval, gradcheck, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .diagnostics import format_rows, run_gradcheck
from .sgt import SGTFormatError
from .synthdata import SynthConfig, generate, save_dataset
from .train import NumericError, ablate, evaluate_cmd, format_table, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return data


def _stdout(line: str) -> None:
    print(line, flush=True)


def cmd_gen_data(args) -> int:
    cfg = SynthConfig.from_json(_read_json(args.config))
    path = save_dataset(generate(cfg), args.out, cfg)
    print(json.dumps({"manifest": str(path)}))
    return EXIT_OK


def _run_config(args) -> RunConfig:
    d = _read_json(args.config)
    d["data"] = args.data
    if getattr(args, "out", None):
        d["out"] = args.out
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    return RunConfig.from_json(d)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    res = train(cfg, resume=args.resume, sink=_stdout)
    if res.checkpoint is not None:
        print(json.dumps({"checkpoint": str(res.checkpoint)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_cmd(args.checkpoint, args.data, args.out)
    print(report.dumps())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(seed=args.seed, points=args.points)
    print(format_rows(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    rows = ablate(cfg, sink=_stdout)
    table = format_table(rows)
    print(table)
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
        (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="signalreid", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic tri-modal dataset")
    g.add_argument("--config", help="JSON synth config (keys of SynthConfig, optional 'preset')")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery splits")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="write the report JSON here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--points", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="baseline / +SIM / +SIM+GAM / full comparison")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, SGTFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
