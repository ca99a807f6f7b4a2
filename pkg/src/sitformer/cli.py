"""Command line: ``graph inspect``, ``symcheck``, ``train``, ``eval``, ``latent``, ``params``.

Exit codes: 0 success, 1 a checked property or training run failed,
2 invalid configuration or unreadable input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .errors import ConfigError
from .grid import GridSpec, Variant, edge_classes

OK, FAILED, CONFIG = 0, 1, 2


def _load_model_cfg(path):
    from .model import SiTConfig

    try:
        return SiTConfig.load(path)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise ConfigError(f"cannot read model config {path}: {e}") from e


def _split(args, image=None):
    from .data import Cifar10Source, SyntheticRotTask, load_synthetic

    if args.task == "synthetic-rot":
        size = image[0] if image else 16
        channels = image[2] if image else 1
        task = SyntheticRotTask(size=size, channels=channels, seed=args.data_seed, n_train=args.train_size, n_test=args.test_size)
        return load_synthetic(args.data, task)
    if args.task == "cifar10":
        if not args.data:
            raise ConfigError("cifar10 needs --data pointing at the binary batch directory")
        return Cifar10Source(args.data, args.train_size, args.test_size, args.data_seed).load()
    raise ConfigError(f"unknown task {args.task!r}")


def cmd_graph_inspect(args) -> int:
    if args.topology == "line1d":
        grid = GridSpec.line(args.cols, args.cyclic)
    else:
        grid = GridSpec(args.rows, args.cols, cyclic=args.cyclic)
    m = edge_classes(grid, args.variant)
    print(json.dumps({"P": grid.num_vertices, "num_classes": m.num_classes, "class_index": m.class_index.tolist()}))
    return OK


def cmd_symcheck(args) -> int:
    from .testkit import symcheck

    cfg = _load_model_cfg(args.config)
    report = symcheck(cfg, seeds=args.seeds, tol=args.tol, probes=args.probes)
    print(json.dumps(report, indent=2))
    return OK if report["passed"] else FAILED


def _train_config(args):
    from .train import TrainConfig

    return TrainConfig(
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed, precision=args.precision
    )


def cmd_train(args) -> int:
    from .train import TrainingDiverged, train

    cfg = _load_model_cfg(args.model)
    tc = _train_config(args)
    split = _split(args, cfg.image)
    try:
        rows = train(cfg, split, tc, args.out, resume=args.resume, task=args.task, log=lambda s: print(s, file=sys.stderr))
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return FAILED
    print(json.dumps(rows[-1] if rows else {}))
    return OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_trained

    _, meta = load_trained(args.ckpt)
    print(json.dumps(evaluate(args.ckpt, _split(args, tuple(meta["model"]["image"])))))
    return OK


def cmd_latent(args) -> int:
    from .model import write_latent_report, latent_report
    from .testkit import make_transforms
    from .train import load_trained

    model, _ = load_trained(args.ckpt)
    h, w, c = model.cfg.image
    probes = torch.randn(args.probes, h, w, c, generator=torch.Generator().manual_seed(args.seed), dtype=torch.float32)
    report = latent_report(model, probes, make_transforms(model.cfg))
    write_latent_report(report, args.out)
    return OK


def cmd_params(args) -> int:
    from .train import parameter_report

    cfgs = {Path(p).stem: _load_model_cfg(p) for p in args.model}
    report = parameter_report(cfgs, args.tolerance)
    print(json.dumps(report, indent=2))
    return OK if all(r["within"] for r in report.values()) else FAILED


def _data_args(p):
    p.add_argument("--task", choices=("synthetic-rot", "cifar10"), required=True)
    p.add_argument("--data", default=None, help="synthetic cache file/dir, or the CIFAR-10 batch directory")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--train-size", type=int, default=5000)
    p.add_argument("--test-size", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sitformer")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("graph", help="edge-class maps")
    gsub = g.add_subparsers(dest="graph_command", required=True)
    gi = gsub.add_parser("inspect")
    gi.add_argument("--rows", type=int, default=1)
    gi.add_argument("--cols", type=int, required=True)
    gi.add_argument("--variant", choices=[v.value for v in Variant], required=True)
    gi.add_argument("--topology", choices=("grid2d", "line1d"), default="grid2d")
    gi.add_argument("--cyclic", action="store_true")
    gi.set_defaults(fn=cmd_graph_inspect)

    s = sub.add_parser("symcheck", help="verify declared invariances on random-weight models")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--probes", type=int, default=4)
    s.set_defaults(fn=cmd_symcheck)

    t = sub.add_parser("train")
    t.add_argument("--model", required=True)
    _data_args(t)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--precision", choices=("single", "double"), default="single")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval")
    e.add_argument("--ckpt", required=True)
    _data_args(e)
    e.set_defaults(fn=cmd_eval)

    la = sub.add_parser("latent", help="export latent deltas under input transforms")
    la.add_argument("--ckpt", required=True)
    la.add_argument("--out", required=True, help=".json or .csv")
    la.add_argument("--probes", type=int, default=8)
    la.add_argument("--seed", type=int, default=0)
    la.set_defaults(fn=cmd_latent)

    pa = sub.add_parser("params", help="compare parameter counts")
    pa.add_argument("--model", action="append", required=True)
    pa.add_argument("--tolerance", type=float, default=0.05)
    pa.set_defaults(fn=cmd_params)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return CONFIG if e.code else OK
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return CONFIG


if __name__ == "__main__":
    sys.exit(main())
