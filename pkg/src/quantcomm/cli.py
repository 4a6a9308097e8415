"""Command-line entry point: ``quantcomm {run,matrix,calibrate,analyze,emit-plots}``.

Config files given with repeated ``--config`` are merged left to right, so
a calibration fragment can be layered over a base config::

    quantcomm calibrate --config base.yaml --out cal
    quantcomm matrix --config base.yaml --config cal/calibration.yaml --out results
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import PRESETS, SCHEMA, ExperimentConfig
from .experiment import RunSpec, analyze, calibrate, emit_plot_data, execute, load_runs, \
    matrix_specs, run_matrix, write_run


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(preset=getattr(args, "preset", None))
    for path in args.config or []:
        with open(path) as fh:
            cfg = cfg.updated(yaml.safe_load(fh) or {})
    override: dict = {"experiment": {}}
    if getattr(args, "out", None):
        override["experiment"]["output_dir"] = str(args.out)
    if getattr(args, "workers", None):
        override["experiment"]["workers"] = args.workers
    if getattr(args, "seed", None) is not None:
        override["experiment"]["seed_start"] = args.seed
    if getattr(args, "seeds", None) is not None:
        override["experiment"]["seeds"] = args.seeds
    hs = getattr(args, "oracle_handshake", None)
    if hs is not None:
        override["experiment"]["handshake_modes"] = {"off": [False], "on": [True], "both": [False, True]}[hs]
    return cfg.updated(override)


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")


def cmd_run(args) -> None:
    cfg = _load_config(args)
    qset = args.qset or next(iter(cfg.quantile_sets()))
    spec = RunSpec(args.method, qset, args.seed if args.seed is not None else cfg.seeds[0],
                   args.oracle_handshake == "on")
    result = execute(cfg, spec)
    write_run(result, cfg.output_dir / "runs")
    _emit(result.summary)


def cmd_matrix(args) -> None:
    cfg = _load_config(args)
    rows, results, failures = run_matrix(cfg)
    _emit({"output_dir": str(cfg.output_dir), "runs": len(results),
           "failures": [s.stem for s, _ in failures], "summary": rows})


def cmd_calibrate(args) -> None:
    cfg = _load_config(args)
    thresholds = calibrate(cfg, args.percentile)
    _emit({"thresholds": thresholds, "fragment": str(cfg.output_dir / "calibration.yaml")})


def cmd_analyze(args) -> None:
    _emit(analyze(args.directory))


def cmd_emit_plots(args) -> None:
    directory = Path(args.directory)
    results = load_runs(directory)
    expected = []
    cfg_path = directory / "config.yaml"
    if cfg_path.exists():
        expected = matrix_specs(ExperimentConfig.load(cfg_path))
    paths = emit_plot_data(results, args.out or directory / "plots", expected)
    _emit({k: str(v) for k, v in paths.items()})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantcomm", description=__doc__.splitlines()[0])
    parser.add_argument("--print-schema", action="store_true", help="print the documented config schema and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    def common(p, with_preset=True):
        p.add_argument("--config", action="append", help="YAML config file (repeatable, merged in order)")
        if with_preset:
            p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="parallel worker processes")
        p.add_argument("--seed", type=int, help="seed (run) or first seed (matrix)")

    p = sub.add_parser("run", help="single mission")
    common(p)
    p.add_argument("--method", default="action",
                   choices=["action", "always", "ego_reward", "never", "reward"])
    p.add_argument("--qset", help="quantile set name from the config")
    p.add_argument("--oracle-handshake", choices=["off", "on"], default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("matrix", help="methods x quantile sets x seeds")
    common(p)
    p.add_argument("--seeds", type=int, help="seeds per cell")
    p.add_argument("--oracle-handshake", choices=["off", "on", "both"], default=None)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("calibrate", help="utility thresholds from Always runs")
    common(p)
    p.add_argument("--percentile", type=float, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("analyze", help="summary table and handshake Wilcoxon test")
    p.add_argument("directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("emit-plots", help="plot-ready CSV tables from a matrix directory")
    p.add_argument("directory")
    p.add_argument("--out")
    p.set_defaults(func=cmd_emit_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_schema:
        sys.stdout.write(SCHEMA)
        return 0
    if not args.command:
        parser.print_help()
        return 2
    try:
        args.func(args)
    except Exception as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
