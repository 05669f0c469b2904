"""Command-line entry point: ``python -m cetnet <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CetnetError
from .model import PRESETS, ModelConfig, build_model
from .tensor import Tensor


def resolve_config(spec: str) -> ModelConfig:
    """A JSON file path, or a preset name such as ``cetnet-t``."""
    path = Path(spec)
    if path.exists():
        return ModelConfig.load(path)
    if spec in PRESETS:
        return PRESETS[spec]()
    raise CetnetError(f"{spec!r} is neither a config file nor a preset ({', '.join(PRESETS)})")


def cmd_build(args):
    cfg = resolve_config(args.config)
    model = build_model(cfg, seed=args.seed)
    size = cfg.input_size
    print(f"pattern {cfg.pattern}  dim {cfg.dim}  depths {list(cfg.depths)}  block {cfg.block}")
    for name, shape, _ in model.cost(size, size):
        print(f"  {name:<8} -> {shape}")
    print(f"parameters: {analysis.count_params(model):,}")
    if args.out:
        save_checkpoint(model, args.out)
        print(f"wrote {args.out}")


def cmd_analyze(args):
    cfg = resolve_config(args.config)
    model = build_model(cfg, seed=None)
    rep = analysis.report(model, args.input_size, args.input_size)
    if args.format == "json":
        print(analysis.format_json(rep))
    else:
        print(analysis.format_table(rep, args.input_size))


def cmd_train(args):
    from .train import TrainConfig, train

    tcfg = TrainConfig.load(args.train_config)
    mcfg = resolve_config(args.config) if args.config else None
    result = train(tcfg, model_cfg=mcfg)
    print(json.dumps({"final_eval_acc": result.final_accuracy, "steps": tcfg.steps}))


def cmd_eval(args):
    from .train import evaluate, read_dataset

    cfg = resolve_config(args.config)
    model = load_checkpoint(args.ckpt, build_model(cfg, seed=None))
    data = read_dataset(args.data)
    print(json.dumps({"top1": evaluate(model, data, args.batch_size), "count": len(data)}))


def cmd_gradcheck(args):
    from .gradcases import TOLERANCE, all_cases, run_all

    if args.list:
        print("\n".join(all_cases()))
        return 0
    names = args.module or None
    worst = 0.0
    for name, err in run_all(names, seed=args.seed):
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name:<24} {err:.3e}  {status}", flush=True)
        worst = max(worst, err)
    print(f"worst relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if worst <= TOLERANCE else 1


def cmd_erf(args):
    cfg = resolve_config(args.config)
    model = load_checkpoint(args.ckpt, build_model(cfg, seed=None)) if args.ckpt else build_model(cfg, args.seed)
    size = args.input_size or cfg.input_size
    probe = np.random.default_rng(args.seed).standard_normal((args.batch, 3, size, size)).astype(np.float32)
    grid = analysis.erf_map(model, args.stage, Tensor(probe))
    analysis.write_pgm(args.out, grid)
    print(f"wrote {args.out} ({grid.shape[1]}x{grid.shape[0]}), support {analysis.erf_support(grid)} cells > 1e-3")


def cmd_synth_data(args):
    from .train import synthetic_dataset, write_dataset

    ds = synthetic_dataset(args.count, args.classes, args.size, args.seed)
    write_dataset(args.out, ds.images, ds.labels)
    print(f"wrote {args.out}: {args.count} images of 3x{args.size}x{args.size}, {args.classes} classes")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cetnet", description="Convolutional-embedding window transformers in NumPy.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a model and print its layout")
    b.add_argument("--config", required=True, help="model config JSON or preset name")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="also write the initialised weights as a checkpoint")
    b.set_defaults(func=cmd_build)

    a = sub.add_parser("analyze", help="static parameter / MAC report")
    a.add_argument("--config", required=True)
    a.add_argument("--input-size", type=int, default=224)
    a.add_argument("--format", choices=("table", "json"), default="table")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", help="train on a binary dataset")
    t.add_argument("--config", help="model config (overrides model_config in the train config)")
    t.add_argument("--train-config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--batch-size", type=int, default=64)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--module", action="append", help="case name (repeatable); default: all")
    g.add_argument("--list", action="store_true", help="list case names")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("erf", help="effective receptive field map as PGM")
    r.add_argument("--config", required=True)
    r.add_argument("--stage", type=int, required=True, help="stage index 1..4")
    r.add_argument("--out", required=True)
    r.add_argument("--ckpt")
    r.add_argument("--input-size", type=int)
    r.add_argument("--batch", type=int, default=4)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_erf)

    s = sub.add_parser("synth-data", help="write a synthetic class-prototype dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (CetnetError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
