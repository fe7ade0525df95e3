"""Command-line experiment driver.

Subcommands:
  run     train an incremental stream from a config file
  bounds  train one of the joint multi-task reference baselines
  report  re-render summary table and plots from an existing records file
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .bounds import BOUND_MODES, run_baseline_bounds
from .config import ExperimentConfig, load_config
from .models import LWF_KINDS, ROBUST_LWF_KINDS
from .reporting import (
    StreamAborted,
    emit_report,
    preflight_output_dir,
    read_records,
    write_plots,
    write_summary,
)
from .stream import run_stream


def _add_common_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to a JSON config file")
    parser.add_argument("--seed", required=True, type=int,
                        help="master seed; all run randomness derives from it")
    parser.add_argument("--output", default=None,
                        help="output directory (overrides config output_dir)")
    parser.add_argument("--mode", choices=("standard", "robust"), default=None)
    parser.add_argument("--method", choices=("anchor_query", "stored_only"),
                        default=None)
    parser.add_argument("--query-method",
                        choices=("feature_knn", "largest_logit", "random", "none"),
                        default=None)
    parser.add_argument("--lwf-kind", choices=LWF_KINDS, default=None)
    parser.add_argument("--robust-lwf-kind", choices=ROBUST_LWF_KINDS, default=None)
    parser.add_argument("--consistency", action=argparse.BooleanOptionalAction,
                        default=None, help="enable the adversarial consistency term")
    parser.add_argument("--epochs", type=int, default=None)


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if args.output is not None:
        config = dataclasses.replace(config, output_dir=args.output)
    if args.mode is not None:
        config = dataclasses.replace(config, mode=args.mode)
    if args.method is not None:
        config = dataclasses.replace(config, method=args.method)
    if args.query_method is not None:
        config = dataclasses.replace(
            config, query=dataclasses.replace(config.query, method=args.query_method))
    hp = config.hyperparameters
    if args.lwf_kind is not None:
        hp = dataclasses.replace(hp, lwf_kind=args.lwf_kind)
    if args.robust_lwf_kind is not None:
        hp = dataclasses.replace(hp, robust_lwf_kind=args.robust_lwf_kind)
    if args.consistency is not None:
        hp = dataclasses.replace(hp, use_consistency=args.consistency)
    config = dataclasses.replace(config, hyperparameters=hp)
    if args.epochs is not None:
        config = dataclasses.replace(
            config, training=dataclasses.replace(config.training, epochs=args.epochs))
    return config


def _resolve_output(config: ExperimentConfig, default_name: str) -> str:
    out = config.output_dir or os.path.join("runs", default_name)
    preflight_output_dir(out)
    return out


def cmd_run(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    output = _resolve_output(config, f"run-seed{args.seed}")
    try:
        report = run_stream(config, args.seed)
    except StreamAborted as aborted:
        emit_report(aborted.report, output)
        print(f"stream aborted; partial report written to {output}", file=sys.stderr)
        return 1
    paths = emit_report(report, output)
    print(f"run complete in {report.wall_clock_sec:.1f}s; wrote:")
    for p in paths:
        print(f"  {p}")
    return 0


def cmd_bounds(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    output = _resolve_output(config, f"bounds-{args.bound}-seed{args.seed}")
    report = run_baseline_bounds(config, args.bound, args.seed)
    paths = emit_report(report, output)
    print(f"{args.bound} baseline complete in {report.wall_clock_sec:.1f}s; wrote:")
    for p in paths:
        print(f"  {p}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    report = read_records(args.records)
    preflight_output_dir(args.output)
    write_summary(os.path.join(args.output, "summary.txt"), report)
    written = write_plots(os.path.join(args.output, "plots"), report)
    print(f"re-rendered summary and {len(written)} plot(s) into {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorcl",
        description="class-incremental training with anchor-queried unlabeled data")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an incremental experiment")
    _add_common_overrides(p_run)
    p_run.set_defaults(func=cmd_run)

    p_bounds = sub.add_parser("bounds", help="run a joint multi-task baseline")
    _add_common_overrides(p_bounds)
    p_bounds.add_argument("--bound", required=True, choices=BOUND_MODES)
    p_bounds.set_defaults(func=cmd_bounds)

    p_report = sub.add_parser("report", help="re-render outputs from records")
    p_report.add_argument("--records", required=True,
                          help="path to a records.jsonl file")
    p_report.add_argument("--output", required=True)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
