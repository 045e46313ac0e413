from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

from .base import ConfigError, NumericError
from .config import PRESET_NAMES, SWEEP_NAMES, ExperimentConfig, load_config, resolve, sweep_grid
from .experiments import best_point, run, sweep
from .util import dumps

_LOGGER = logging.getLogger("cli")

EXPERIMENT_COMMANDS = ("verify", "twocolors-ac", "twocolors-q", "multitask", "gradcheck")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_grid(specs: Sequence[str]) -> Dict[str, List[Any]]:
    """``["meta_lr=1e-5,1e-4", "L=4,7"]`` -> ``{"meta_lr": [1e-5, 1e-4], "L": [4, 7]}``."""
    grid: Dict[str, List[Any]] = {}
    for spec in specs:
        key, sep, values = spec.partition("=")
        if not sep or not key or not values:
            raise ConfigError("grid", f"expected key=v1,v2,... got {spec!r}")
        grid[key.strip()] = [_parse_value(v.strip()) for v in values.split(",")]
    return grid


def _load(args: argparse.Namespace, experiment: Optional[str]) -> ExperimentConfig:
    cfg = load_config(args.config, args.preset)
    if experiment is not None and cfg.experiment != experiment:
        cfg = cfg.replace(experiment=experiment)
    return resolve(cfg, seed=args.seed, out_dir=args.out)


def _emit(rows: Sequence[Dict[str, Any]]) -> None:
    for row in rows:
        sys.stdout.write(dumps(row) + "\n")
    sys.stdout.flush()


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = _load(args, args.command)
    result = run(cfg)
    _emit(result.rows)
    if result.status:
        _LOGGER.warning("%s finished with failures; see %s", cfg.experiment, result.out_dir)
    return result.status


def cmd_sweep(args: argparse.Namespace) -> int:
    template = _load(args, None)
    rows = sweep(template, sweep_grid(args.sweep, parse_grid(args.grid)), workers=args.workers)
    _emit(rows)
    best = best_point(rows)
    if best is not None:
        _LOGGER.info("Best point %d: mean score %.4f", best["point"], best["mean_score"])
    return 0 if any(r.get("status") == "ok" for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaboot",
        description="Meta-gradient experiments: verification, two-colors, multi-task, gradient checks",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Flat JSON config file")
    common.add_argument("--preset", choices=PRESET_NAMES, help="Named preset applied before the config file")
    common.add_argument("--seed", type=int, help="Run a single seed (overrides seed and seeds)")
    common.add_argument("--out", help="Output directory (default: config out_dir)")
    common.add_argument("--debug", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENT_COMMANDS:
        p = sub.add_parser(name, parents=[common], help=f"Run the {name} experiment")
        p.set_defaults(func=cmd_experiment)
    p = sub.add_parser("sweep", parents=[common], help="One run per grid point of the config template")
    p.add_argument("--sweep", choices=SWEEP_NAMES, help="Named grid; --grid axes are merged over it")
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="Config field and comma-separated values; repeat for a product grid")
    p.add_argument("--workers", type=int, default=1, help="Parallel worker processes")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.debug else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )

    try:
        return args.func(args)
    except ConfigError as e:
        sys.stderr.write(f"ERROR: invalid configuration: {e}\n")
        return EXIT_CONFIG
    except NumericError as e:
        sys.stderr.write(f"ERROR: run aborted: {e}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
