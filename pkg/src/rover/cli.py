"""Command line entry point: ``rover run|compare|sweep``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    RUN_MODES,
    ConfigError,
    compare,
    load_config,
    run,
    sweep_window_size,
)
from .marginalizer import MODES
from .window import DegenerateSystemError

EXIT_CONFIG = 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--mode", choices=RUN_MODES)
    p.add_argument("--window", type=int)
    p.add_argument("--marg", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--out", help="directory for report.json, trajectory.csv, tags.csv, policy.jsonl")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rover", description="Simulate, estimate and score a tag-mapping run.")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("run", help="run one configuration"))

    p = sub.add_parser("compare", help="run two configurations on identical measurements")
    _common(p)
    p.add_argument("--against", choices=MODES, default="off", help="marginalization mode of the second run")

    p = sub.add_parser("sweep", help="accuracy and solve time across window sizes")
    _common(p)
    p.add_argument("--sizes", default="10,20,50", help="comma-separated window sizes")
    return parser


def _config(args):
    cfg = load_config(args.config)
    overrides = {
        "mode": args.mode,
        "window": args.window,
        "marginalization": args.marg,
        "seed": args.seed,
        "trials": args.trials,
        "out": args.out,
    }
    try:
        return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    try:
        cfg = _config(args)
        if args.command == "run":
            reports = run(cfg)
            summary = [
                {
                    "seed": r.seed,
                    "mean_robot_error": r.mean_robot_error,
                    "median_robot_error": r.median_robot_error,
                    "mean_los_tag_error": r.mean_los_tag_error,
                    "tag_errors": r.tag_errors,
                    "mean_solve_ms": r.mean_solve_ms,
                    "degenerate": r.degenerate,
                }
                for r in reports
            ]
            _emit(summary if len(summary) > 1 else summary[0])
        elif args.command == "compare":
            paired = compare(cfg, replace(cfg, marginalization=args.against))
            payload = {
                "a": {"marginalization": cfg.marginalization, "mean_robot_error": paired.a.mean_robot_error},
                "b": {"marginalization": args.against, "mean_robot_error": paired.b.mean_robot_error},
                "final_difference": paired.difference[-1] if paired.difference else None,
            }
            if cfg.out:
                Path(cfg.out).mkdir(parents=True, exist_ok=True)
                (Path(cfg.out) / "compare.json").write_text(
                    json.dumps({**payload, "times": paired.times, "difference": paired.difference})
                )
            _emit(payload)
        else:
            try:
                sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
            except ValueError as exc:
                raise ConfigError(f"bad --sizes: {exc}") from exc
            seeds = [cfg.seed + i for i in range(cfg.trials)]
            rows = sweep_window_size(cfg, sizes, seeds)
            if cfg.out:
                Path(cfg.out).mkdir(parents=True, exist_ok=True)
                (Path(cfg.out) / "sweep.json").write_text(json.dumps(rows, indent=2))
            _emit(rows)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateSystemError as exc:
        print(f"estimator degenerate: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
