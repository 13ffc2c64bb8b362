#!/usr/bin/env python3
"""
HERL simulator command line.

Usage:
    python main.py run default_1000 --seed 7
    python main.py sweep sweep_alpha --axis alpha --values 1 5 10
    python main.py validate scenarios/motivation_20clients.toml
    python main.py dump-qtable results/default_1000

Environment:
    HERL_OUTPUT_DIR   output directory override (default: results/<scenario>)
    HERL_LOG_LEVEL    logging level (default: INFO)
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

from herl.errors import ConfigError, InputError
from herl.harness import SWEEP_AXES, dump_qtable, greedy_policy, run_comparison, run_sweep
from herl.scenario import ScenarioConfig, parse_config, resolve_scenario_path

logger = logging.getLogger("herl")

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def setup_logging() -> None:
    level = os.getenv("HERL_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def load_scenario(name: str, seed=None) -> ScenarioConfig:
    cfg = parse_config(resolve_scenario_path(name))
    if seed is not None:
        cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update={"seeds": [seed]})})
    return cfg


def output_dir_for(cfg: ScenarioConfig, override=None) -> Path:
    if override:
        return Path(override)
    return Path(os.getenv("HERL_OUTPUT_DIR") or Path("results") / cfg.name)


def print_summary(title: str, report) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    print(report.summary.to_string(index=False))
    print(f"\n  ✓ Runs:   {len(report.results)}")
    if report.failures:
        print(f"  ✗ Failed: {len(report.failures)}")
    print(f"  📁 Output: {report.output_dir}")
    print("=" * 60)


def cmd_run(args) -> int:
    cfg = load_scenario(args.config, args.seed)
    report = run_comparison(cfg, output_dir_for(cfg, args.output))
    print_summary(f"Scenario '{cfg.name}'", report)
    return EXIT_OK if report.ok else EXIT_RUN_FAILURE


def cmd_sweep(args) -> int:
    cfg = load_scenario(args.config, args.seed)
    report = run_sweep(cfg, args.axis, args.values, output_dir_for(cfg, args.output))
    print("\n" + "=" * 60)
    print(f"Sweep over {args.axis} for '{cfg.name}'")
    print("=" * 60)
    print(report.table.to_string(index=False))
    print(f"\n  📁 Output: {report.output_dir}")
    print("=" * 60)
    return EXIT_OK if report.ok else EXIT_RUN_FAILURE


def cmd_validate(args) -> int:
    cfg = load_scenario(args.config)
    table, _ = cfg.he_setup()
    grid = cfg.action_grid(table)
    print(f"✓ {cfg.name}: valid")
    print(f"  tiering:    {cfg.tiering.method} K={cfg.tiering.k} criteria={cfg.tiering.criteria}")
    print(f"  strategies: {', '.join(cfg.strategies.names)}")
    print(f"  seeds:      {cfg.run.seeds}  rounds: {cfg.run.rounds}")
    print(f"  actions:    {' '.join(p.label for p in grid)}")
    return EXIT_OK


def cmd_dump_qtable(args) -> int:
    for name, table in dump_qtable(args.run_dir).items():
        print(f"\n📄 {name}")
        print(greedy_policy(table).to_string(index=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Simulate HE parameter selection for tiered federated learning")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run every strategy x seed cell of a scenario")
    run.add_argument("config", help="Scenario file or name under scenarios/")
    run.add_argument("--seed", type=int, default=None, help="Run a single seed instead of the scenario's list")
    run.add_argument("--output", default=None, help="Output directory (or set HERL_OUTPUT_DIR)")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="Repeat the comparison across values of one axis")
    sweep.add_argument("config", help="Scenario file or name under scenarios/")
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", nargs="+", required=True, type=float)
    sweep.add_argument("--seed", type=int, default=None)
    sweep.add_argument("--output", default=None)
    sweep.set_defaults(func=cmd_sweep)

    validate = sub.add_parser("validate", help="Check a scenario without running it")
    validate.add_argument("config")
    validate.set_defaults(func=cmd_validate)

    dump = sub.add_parser("dump-qtable", help="Print the greedy plan per state from saved Q-tables")
    dump.add_argument("run_dir")
    dump.set_defaults(func=cmd_dump_qtable)
    return parser


def main(argv=None) -> int:
    load_dotenv()
    setup_logging()
    args = build_parser().parse_args(argv)
    if args.command == "sweep" and args.axis == "K":
        args.values = [int(v) for v in args.values]
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"✗ Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except InputError as e:
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except Exception as e:
        logger.error(f"❌ Run failed: {e}", exc_info=True)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
