"""``gather-excite`` command-line entry point.

Exit codes: 0 success, 1 failed gradient check, 2 configuration / input
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis, cost, gradcheck
from .config import load_config, parse_arch
from .data import load_cifar, make_synthetic_cifar
from .exceptions import (CheckpointError, ConfigurationError, DimensionError, FormatError, NumericalError,
                         UsageError)
from .models import GEPlacement, block_alias, resolve_block_name
from .training import evaluate, load_checkpoint, seeded_model, train

logger = logging.getLogger("gather_excite")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _placement(text):
    return GEPlacement.parse(text) if text else None


# ---------------------------------------------------------------------------
# subcommands


def cmd_count(args):
    arch = parse_arch(args.arch, args.num_classes)
    place = _placement(args.ge)
    report = cost.count(arch, place, args.input_size)
    if args.json:
        print(report.to_json())
    else:
        print(report.to_text(layers=not args.totals_only))
    return EXIT_OK


def _datasets(cfg, need_train=True):
    if cfg.data.path is None:
        raise ConfigurationError("config has no [data] path")
    train_ds = None
    if need_train:
        train_ds = load_cifar(cfg.data.path, cfg.data.variant, "train").subset(cfg.data.subset)
    test_ds = load_cifar(cfg.data.path, cfg.data.variant, "test").subset(cfg.data.eval_subset)
    return train_ds, test_ds


def _progress(epoch, batch, loss):
    logger.debug("epoch %d batch %d loss %.4f", epoch, batch, loss)


def cmd_train(args):
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    train_ds, test_ds = _datasets(cfg)
    run_dir = Path(args.output_dir or cfg.output_dir) / cfg.name
    cfg.write_echo(run_dir)
    model = seeded_model(cfg.arch, cfg.placement, cfg.seed)
    _, metrics = train(model, train_ds, cfg.train, test_ds, run_dir=run_dir,
                       resume=args.resume, progress=_progress)
    last = metrics[-1] if metrics else None
    if last:
        print(f"epoch {last['epoch']}: train_loss {last['train_loss']:.4f} "
              f"val_top1 {last['val_top1']:.4f} val_top5 {last['val_top5']:.4f}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _load_run_model(cfg, args):
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.run_dir / "checkpoints" / "last.gekt"
    if not ckpt.exists():
        raise ConfigurationError(f"checkpoint {ckpt} not found")
    return load_checkpoint(ckpt)


def cmd_eval(args):
    cfg = load_config(args.config)
    _, test_ds = _datasets(cfg, need_train=False)
    model = _load_run_model(cfg, args)
    top1, top5 = evaluate(model, test_ds)
    out = {"top1_error": top1, "top5_error": top5, "samples": len(test_ds)}
    dest = cfg.run_dir / "analysis"
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "eval.json").write_text(json.dumps(out, indent=2) + "\n")
    print(f"top-1 error {top1:.4f}  top-5 error {top5:.4f}  ({len(test_ds)} images)")
    return EXIT_OK


def cmd_gradcheck(args):
    mode = args.mode or ("float64" if args.model else "float32")
    if args.model:
        eps = args.eps or 1e-6
        arch = parse_arch(args.model, width_divisor=args.width_divisor)
        name = f"model:{args.model}:{args.ge or 'none'}"
        results = [gradcheck.check(name, gradcheck.model_case(arch, _placement(args.ge), args.batch),
                                   mode, args.max_coords, eps=eps)]
    else:
        names = "all" if args.op in (None, "all") else args.op.split(",")
        try:
            results = gradcheck.run(names, mode, args.max_coords, eps=args.eps or gradcheck.EPS)
        except KeyError as exc:
            raise ConfigurationError(exc.args[0]) from exc
    failed = 0
    for r in results:
        print(r.summary())
        if not r.passed:
            failed += 1
            for tensor, idx, ana, num, err in r.failures[:20]:
                print(f"    {tensor}[{idx}] analytic={ana:.6e} numeric={num:.6e} err={err:.2e}")
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_selectivity(args):
    cfg = load_config(args.config)
    _, test_ds = _datasets(cfg, need_train=False)
    model = _load_run_model(cfg, args)
    dest = cfg.run_dir / "analysis"
    dest.mkdir(parents=True, exist_ok=True)
    for layer in args.layer:
        hist = analysis.class_selectivity(model, test_ds, layer)
        path = dest / f"selectivity_{block_alias(resolve_block_name(layer))}.csv"
        analysis.export_csv(hist, path)
        print(f"{layer}: {len(hist.indices)} channels, mean index {hist.indices.mean():.4f} -> {path}")
    return EXIT_OK


def cmd_prune(args):
    cfg = load_config(args.config)
    _, test_ds = _datasets(cfg, need_train=False)
    model = _load_run_model(cfg, args)
    orders = analysis.ORDERS if args.orders == "both" else (args.orders,)
    curves = [analysis.prune_curve(model, test_ds, args.block, o) for o in orders]
    dest = cfg.run_dir / "analysis"
    dest.mkdir(parents=True, exist_ok=True)
    path = dest / f"prune_{block_alias(resolve_block_name(args.block))}.csv"
    analysis.export_csv(curves, path)
    for c in curves:
        print(c.order + ": " + " ".join(f"{r:.1f}:{a:.3f}" for r, a in c.points))
    print(f"wrote {sum(len(c.points) for c in curves)} points to {path}")
    return EXIT_OK


def cmd_synth_data(args):
    root = make_synthetic_cifar(args.directory, args.train, args.test, args.variant, args.seed)
    print(f"wrote synthetic {args.variant} data to {root}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="gather-excite", description="Gather-excite operators: cost, training, analysis.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for epoch logs, -vv for batch logs")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("count", help="parameter and MAC report")
    s.add_argument("--arch", required=True, help="resnet50, resnet101, resnet110, resnet164, wrn-16-8, resnet50-narrow")
    s.add_argument("--ge", help="placement kind:extent:stages, e.g. theta:global:all (default: none)")
    s.add_argument("--input-size", type=int, help="square input side (default: the architecture's)")
    s.add_argument("--num-classes", type=int, help="override the class count")
    s.add_argument("--json", action="store_true", help="emit JSON instead of text")
    s.add_argument("--totals-only", action="store_true", help="omit per-layer lines in text mode")
    s.set_defaults(fn=cmd_count)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("config", help="TOML run config")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--epochs", type=int, help="override [train] epochs")
    s.add_argument("--output-dir", help="override output_dir")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="top-1/top-5 error of a checkpoint on the test split")
    s.add_argument("config")
    s.add_argument("--checkpoint", help="default: <run>/checkpoints/last.gekt")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--op", help="'all' or comma-separated case names")
    g.add_argument("--model", help="architecture to check end to end")
    s.add_argument("--ge", help="placement for --model")
    s.add_argument("--width-divisor", type=int, default=16, help="channel divisor for --model (default 16)")
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--mode", choices=("float32", "float64"),
                   help="precision (default: float32 for --op, float64 for --model)")
    s.add_argument("--eps", type=float,
                   help="finite-difference step (default: 1e-4, or 1e-6 for --model)")
    s.add_argument("--max-coords", type=int, default=64, help="sampled coordinates per tensor")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("selectivity", help="class selectivity histogram of block outputs")
    s.add_argument("config")
    s.add_argument("--layer", action="append", required=True, help="block, e.g. conv4-6-relu (repeatable)")
    s.add_argument("--checkpoint")
    s.set_defaults(fn=cmd_selectivity)

    s = sub.add_parser("prune", help="gate-importance pruning curve of one block")
    s.add_argument("config")
    s.add_argument("--block", required=True, help="block, e.g. conv4-6 or stage4.block6")
    s.add_argument("--orders", choices=("ascending", "descending", "both"), default="both")
    s.add_argument("--checkpoint")
    s.set_defaults(fn=cmd_prune)

    s = sub.add_parser("synth-data", help="write a synthetic dataset in CIFAR binary layout")
    s.add_argument("directory")
    s.add_argument("--train", type=int, default=1000)
    s.add_argument("--test", type=int, default=500)
    s.add_argument("--variant", choices=("cifar10", "cifar100"), default="cifar10")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(message)s")
    try:
        return args.fn(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, DimensionError, UsageError, FormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
