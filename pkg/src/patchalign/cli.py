"""Command-line entry point: synth / train / distill / eval / params / report."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import NumericError, ValidationError

RUN_ROOT_ENV = "PATCHALIGN_RUN_ROOT"


def _run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def parse_config(path: str | None, overrides: list[str]):
    """Load a JSON config file (empty/missing fields mean defaults), then apply
    key=value overrides. Dotted keys address nested sections."""
    from .trainer import config_from_dict

    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file not found: {path}")
        text = p.read_text().strip()
        raw = json.loads(text) if text else {}
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} must be key=value")
        key, _, value = item.partition("=")
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass  # bare strings stay strings
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config_from_dict(raw)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True, help="run directory (under run root if relative)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")


def _resolve_out(out: str) -> Path:
    p = Path(out)
    return p if p.is_absolute() else _run_root() / p


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchalign")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    for name in ("train", "distill"):
        p = sub.add_parser(name, help=f"run {name}")
        _add_run_flags(p)
        if name == "distill":
            p.add_argument("--teacher", default=None, help="teacher checkpoint path")

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True, help="evaluation dataset directory")
    p.add_argument("--knn-k", type=int, default=5)

    p = sub.add_parser("params", help="parameter accounting table")
    p.add_argument("--config", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")

    p = sub.add_parser("report", help="compare runs and emit figures")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default=None, help="write the table to this file")
    return parser


def _apply_common(config, args):
    from .trainer import config_from_dict, config_to_dict

    d = config_to_dict(config)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.steps is not None:
        d["steps"] = args.steps
    return config_from_dict(d)


def _cmd_synth(args) -> int:
    from .data import generate_dataset
    manifest = generate_dataset(args.count, args.canvas, args.seed, args.out)
    print(f"wrote {manifest.count} samples to {args.out} "
          f"({len(manifest.class_names)} classes, canvas {manifest.canvas})")
    return 0


def _cmd_train(args, mode: str) -> int:
    from .trainer import run_training, config_from_dict, config_to_dict

    overrides = list(args.overrides)
    config = parse_config(args.config, overrides)
    d = config_to_dict(config)
    d["mode"] = mode
    if mode == "distill":
        if getattr(args, "teacher", None):
            d["teacher_checkpoint"] = args.teacher
        d.setdefault("ema", {})
        if isinstance(d["ema"], dict):
            d["ema"]["scope"] = "frozen"
        else:
            d["ema"].scope = "frozen"
    config = config_from_dict(d)
    config = _apply_common(config, args)
    out = _resolve_out(args.out)
    run_training(config, out, resume_from=args.resume)
    print(f"run complete: {out}")
    return 0


def _cmd_eval(args) -> int:
    from .evalsuite import evaluate_run
    report = evaluate_run(args.run, args.data, knn_k=args.knn_k)
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def _cmd_params(args) -> int:
    from .ema import count_trainable_params, param_table
    from .model import Tokenizer
    from .trainer import build_student

    config = parse_config(args.config, args.overrides)
    tokenizer = Tokenizer(max_len=config.max_len)
    student = build_student(config, tokenizer)
    rows = param_table(student, config.ema)
    header = f"{'name':<40} {'shape':<20} {'trainable':<10} {'shadowed':<10}"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(f"{r['name']:<40} {str(r['shape']):<20} "
              f"{str(r['trainable']):<10} {str(r['shadowed']):<10}")
    counts = count_trainable_params(student, config.ema)
    print()
    print(f"trainable:          {counts['trainable']}")
    print(f"ema shadow ({config.ema.scope}): {counts['ema_shadow']}")
    print(f"total:              {counts['total']}")
    print(f"head-only reduction fraction: {counts['reduction_fraction']:.4f}")
    return 0


def _cmd_report(args) -> int:
    from .evalsuite import patch_loss_report

    columns = ["zero_shot_miou_bg", "zero_shot_miou_nobg", "knn_top1",
               "i2t_r1", "t2i_r1", "probe_miou"]
    lines = [f"{'run':<28} " + " ".join(f"{c:>20}" for c in columns)]
    for run in args.runs:
        run = Path(run)
        report_path = run / "eval" / "report.json"
        if not report_path.exists():
            raise ValidationError(f"no eval report in {run}; run `patchalign eval` first")
        with open(report_path) as f:
            rep = json.load(f)
        cells = " ".join(
            f"{rep.get(c):>20.4f}" if isinstance(rep.get(c), float) else f"{'-':>20}"
            for c in columns)
        lines.append(f"{run.name:<28} {cells}")
        metrics = run / "metrics.jsonl"
        if metrics.exists():
            patch_loss_report(metrics, run / "eval" / "patch_loss.csv",
                              out_plot=run / "eval" / "patch_loss.png")
    table = "\n".join(lines)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    return 0


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    if not argv:
        parser.print_usage()
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code else 0
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "train":
            return _cmd_train(args, "pretrain")
        if args.command == "distill":
            return _cmd_train(args, "distill")
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "params":
            return _cmd_params(args)
        if args.command == "report":
            return _cmd_report(args)
        parser.print_usage()
        return 1
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericError, OSError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
