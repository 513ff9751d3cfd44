"""Command-line experiment driver.

    udnpos run <config.yaml> [--seed N] [--out DIR] [--mode M] [--filter F]
    udnpos sweep <dir-or-files...> [--out DIR] [--filter F] [--mode M]
    udnpos replay <trace.csv> [--burn-in N]

Exit code 0 only if every run completes. The default output directory comes
from $UDNPOS_OUT (falling back to ./out).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ScenarioConfig, load_config
from .harness import replay_trace, run_scenario, sweep


def _apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["seeds"] = None
    if getattr(args, "runs", None) is not None:
        updates["runs"] = args.runs
        updates["seeds"] = None
    if args.mode is not None:
        updates["fidelity"] = args.mode
    if args.filter is not None:
        updates["filter"] = args.filter
    if getattr(args, "workers", None) is not None:
        updates["workers"] = args.workers
    return replace(cfg, **updates) if updates else cfg


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=None, help="override the base seed")
    parser.add_argument("--runs", type=int, default=None, help="override the run count")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument(
        "--mode", choices=["measurement", "channel"], default=None, help="fidelity override"
    )
    parser.add_argument(
        "--filter", choices=["doa-only", "pos-clock", "pos-sync"], default=None,
        help="fusion filter override",
    )
    parser.add_argument("--workers", type=int, default=None, help="seed worker pool size")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="udnpos", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario config")
    p_run.add_argument("config", help="scenario YAML file")
    _add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="run every config in a directory")
    p_sweep.add_argument("paths", nargs="+", help="config files or directories")
    _add_common(p_sweep)

    p_replay = sub.add_parser("replay", help="recompute metrics from a trace CSV")
    p_replay.add_argument("trace", help="per-step trace CSV")
    p_replay.add_argument("--burn-in", type=int, default=10)

    args = parser.parse_args(argv)

    if args.command == "run":
        try:
            cfg = _apply_overrides(load_config(args.config), args)
            report = run_scenario(cfg, out_dir=args.out)
        except (ConfigError, OSError, RuntimeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(json.dumps(report.to_dict()["aggregate"], indent=2, sort_keys=True))
        return 0

    if args.command == "sweep":
        files: list[Path] = []
        for p in args.paths:
            path = Path(p)
            if path.is_dir():
                files.extend(sorted(path.glob("*.yaml")))
            else:
                files.append(path)
        if not files:
            print("sweep: no configs found (empty sweep)", file=sys.stderr)
            return 0
        configs = []
        for f in files:
            try:
                configs.append((f.stem, _apply_overrides(load_config(f), args)))
            except ConfigError as exc:
                print(f"error in {f}: {exc}", file=sys.stderr)
                return 1
        rows, all_ok = sweep(configs, out_dir=args.out)
        for row in rows:
            print(
                f"{row['label']:30s} {row['status']:10s} "
                f"pos_rmse={row['position_rmse_m']:<10.4g} "
                f"clk_rmse={row['un_clock_rmse_s']:<10.4g}"
            )
        return 0 if all_ok else 1

    if args.command == "replay":
        try:
            metrics = replay_trace(args.trace, burn_in=args.burn_in)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(json.dumps(metrics, indent=2, sort_keys=True))
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
