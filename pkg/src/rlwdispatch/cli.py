"""``rlwdispatch`` command line.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .experiment import (
    ConfigError,
    cmd_abtest,
    cmd_compare,
    cmd_gen_log,
    cmd_heatmap,
    cmd_run,
    cmd_sweep,
    load_config,
    merge_configs,
    parse_config,
    parse_seeds,
    write_heatmap,
)

log = logging.getLogger("rlwdispatch")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _common(p: argparse.ArgumentParser, multi_config: bool = False) -> None:
    if multi_config:
        p.add_argument("--config", action="append", metavar="PATH",
                       help="YAML experiment config; repeat to compare policies from several files")
    else:
        p.add_argument("--config", metavar="PATH", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="single seed (overrides the config)")
    p.add_argument("--seeds", metavar="N..M", help="inclusive seed range, e.g. 0..19")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--price-scale", type=float, metavar="F", help="multiply every generated price by F")
    p.add_argument("--horizon", type=float, metavar="S", help="simulated seconds")
    p.add_argument("--workers", type=int, metavar="N", help="processes for independent runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlwdispatch", description="Ridehailing dispatch simulation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one policy and write its report")
    _common(p)
    p.add_argument("--policy", metavar="NAME", help="policy name (from the config's policies) or kind")

    p = sub.add_parser("compare", help="matched-seed comparison against a baseline")
    _common(p, multi_config=True)
    p.add_argument("--baseline", metavar="NAME")

    p = sub.add_parser("abtest", help="time-flipping A/B test between two policies")
    _common(p)
    p.add_argument("--policy", nargs=2, metavar=("CONTROL", "TREATMENT"))
    p.add_argument("--flip-hours", type=float, metavar="H")

    p = sub.add_parser("sweep", help="random/grid search over the RLW edge weights")
    _common(p)
    p.add_argument("--policy", metavar="NAME")
    p.add_argument("--budget", type=int, metavar="N")

    p = sub.add_parser("heatmap", help="export the value snapshot nearest a time as row,col,value")
    p.add_argument("run_dir", metavar="RUN_DIR")
    p.add_argument("--t", type=float, required=True, metavar="SECONDS")
    p.add_argument("--out", metavar="PATH", help="CSV path (default: stdout)")

    p = sub.add_parser("gen-log", help="write a trip event log generated from a preset")
    _common(p)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    o = {}
    if getattr(args, "seeds", None) is not None:
        o["seeds"] = parse_seeds(args.seeds)
    elif getattr(args, "seed", None) is not None:
        o["seeds"] = [args.seed]
    for key, attr in (("out", "out"), ("price_scale", "price_scale"), ("horizon", "horizon"), ("workers", "workers")):
        v = getattr(args, attr, None)
        if v is not None:
            o[key] = v
    return o


def _load(path: Optional[str], overrides: dict):
    if path is None:
        return parse_config({}, overrides)
    return load_config(path, overrides)


def _select_policy(cfg, name: Optional[str]):
    """``--policy`` may name a configured policy or a policy kind with default parameters."""
    if name is None or name in [p.name for p in cfg.policies]:
        return cfg, name
    raw = {"policy": name}
    again = parse_config(raw)
    cfg.policies = cfg.policies + again.policies
    return cfg, name


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure inside a run is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "heatmap":
        rows = cmd_heatmap(args.run_dir, args.t)
        if args.out:
            write_heatmap(rows, args.out)
        else:
            sys.stdout.write("row,col,value\n")
            for r, c, v in rows:
                sys.stdout.write(f"{r},{c},{v!r}\n")
        return EXIT_OK

    overrides = _overrides(args)
    if args.command == "compare":
        paths = args.config or [None]
        cfgs = [_load(p, overrides) for p in paths]
        cfg = merge_configs(cfgs) if len(cfgs) > 1 else cfgs[0]
        report = cmd_compare(cfg, args.baseline)
        report.write(cfg.out)
        sys.stdout.write(report.table())
        return EXIT_OK

    cfg = _load(args.config, overrides)
    if args.command == "run":
        cfg, name = _select_policy(cfg, args.policy)
        paths = cmd_run(cfg, policy_name=name)
        log.info("wrote %d files to %s", len(paths), cfg.out)
        totals = Path(cfg.out) / "totals.json"
        if totals.exists():
            sys.stdout.write(totals.read_text())
        return EXIT_OK
    if args.command == "abtest":
        control = treatment = None
        if args.policy:
            cfg, control = _select_policy(cfg, args.policy[0])
            cfg, treatment = _select_policy(cfg, args.policy[1])
        if args.flip_hours is not None and args.flip_hours <= 0:
            raise ConfigError("flip_hours: must be > 0")
        report = cmd_abtest(cfg, control, treatment, args.flip_hours)
        report.write(cfg.out)
        sys.stdout.write(json.dumps(report.ratios(), sort_keys=True) + "\n")
        return EXIT_OK
    if args.command == "sweep":
        if args.budget is not None:
            if cfg.sweep is None:
                raise ConfigError("sweep: section missing")
            if args.budget < 1:
                raise ConfigError("sweep.budget: must be >= 1")
            from dataclasses import replace

            cfg.sweep = replace(cfg.sweep, budget=args.budget)
            if len(cfg.sweep.grid) > args.budget:
                raise ConfigError("sweep.budget: smaller than the number of grid points")
        result = cmd_sweep(cfg, args.policy)
        result.write(cfg.out)
        sys.stdout.write(json.dumps(result.best, sort_keys=True) + "\n")
        return EXIT_OK
    if args.command == "gen-log":
        out = Path(cfg.out)
        path = out if out.suffix == ".jsonl" else out / "trip_events.jsonl"
        cmd_gen_log(cfg, path)
        sys.stdout.write(f"{path}\n")
        return EXIT_OK
    raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
