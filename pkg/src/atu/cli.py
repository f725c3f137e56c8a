"""``atu`` command line.

Every ExperimentConfig key is also a flag (``--aug-ratio 0.4``); flags
override ``--preset`` which overrides ``--config``.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from . import harness as H


def _add_config_flags(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=sorted(H.PRESETS), metavar="NAME", help="named preset (see `atu presets`)")
    for f in fields(H.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            p.add_argument(flag, required=seed_required, help="RNG seed")
        else:
            p.add_argument(flag, dest=f.name, default=None, help=f"default: {getattr(H.ExperimentConfig, f.name)}")


def _config(args) -> H.ExperimentConfig:
    cfg = H.ExperimentConfig()
    if args.config:
        cfg = H.load_config(args.config, cfg)
    if args.preset:
        cfg = cfg.with_values(**H.PRESETS[args.preset])
    kv = {f.name: getattr(args, f.name) for f in fields(H.ExperimentConfig) if getattr(args, f.name, None) is not None}
    cfg = cfg.with_values(**kv)
    cfg.validate()
    return cfg


def _print_rows(rows) -> None:
    print(",".join(H.RESULT_FIELDS))
    for r in rows:
        print(",".join(str(v) for v in r.as_list()))


def cmd_train(args) -> int:
    cfg = _config(args)
    rows = H.run(cfg, reuse=not args.force, stop_after=args.stop_after)
    print(f"run directory: {H.run_dir(cfg)}", file=sys.stderr)
    if rows:
        _print_rows(rows)
    else:
        print("stopped early; rerun the same command to resume", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    domains = args.domains.split(",") if args.domains else [None]
    ks = [int(k) for k in args.eval_ks.split(",")] if args.eval_ks else [None]
    rows = [H.evaluate_run(cfg, d, k) for d in domains for k in ks]
    if args.out:
        H.write_results(args.out, rows)
    _print_rows(rows)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows = H.sweep(cfg, args.axis, [v for v in args.values.split(",") if v], args.out, args.jobs, not args.force)
    _print_rows(rows)
    return 0


def cmd_plot(args) -> int:
    path = H.emit_plot_data(args.run_dir, args.kind, args.out)
    print(path)
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(quick=args.quick, suites=args.suite)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_presets(args) -> int:
    for name in sorted(H.PRESETS):
        print(name, " ".join(f"{k}={v}" for k, v in H.PRESETS[name].items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="atu", description="Task up-sampling meta-learning experiments")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train and evaluate one config (resumes from its checkpoint)")
    _add_config_flags(p, seed_required=True)
    p.add_argument("--stop-after", type=int, default=None, help="halt after this many outer iterations")
    p.add_argument("--force", action="store_true", help="ignore a cached finished run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a trained regression run")
    _add_config_flags(p)
    p.add_argument("--domains", help="comma-separated domain presets")
    p.add_argument("--eval-ks", help="comma-separated support sizes")
    p.add_argument("--out", help="results file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="one run per value of a config key")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, help="config key, e.g. augmentation-ratio or K")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", default="sweep.csv", help="merged results file")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("emit-plot-data", help="write plotting columns from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--kind", required=True, choices=H.PLOT_KINDS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("verify", help="run the oracle and property suites")
    p.add_argument("--quick", action="store_true", help="fewer random instances")
    p.add_argument("--suite", action="append", help="restrict to a suite (repeatable)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("presets", help="list presets")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"atu: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
