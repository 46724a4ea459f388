"""Command-line entry point: run, sweep, report, partition, verify."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import harness as H


def _config(args, **overrides) -> H.ExperimentConfig:
    extra = {"out": getattr(args, "out", None)}
    if getattr(args, "seed", None) is not None:
        extra["seeds"] = (args.seed,)
    if getattr(args, "ablation", None) is not None:
        extra["ablation"] = args.ablation
    extra.update(overrides)
    if args.config:
        return H.ExperimentConfig.load(args.config, **extra)
    return H.ExperimentConfig().replace(**{k: v for k, v in extra.items() if v is not None}).validate()


def cmd_run(args) -> int:
    cfg = _config(args)
    art = H.run_experiment(cfg)
    for s in art.seeds:
        state = "complete" if s.complete else f"incomplete ({s.error})"
        print(f"seed {s.seed}: {state} -> {s.directory}")
    for k, v in art.summary.items():
        print(f"{k} = {v:.6g}")
    return 0 if art.complete else 1


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = [v for v in args.values.split(",") if v.strip()]
    grid = H.sweep(cfg, args.axis, values)
    print((Path(cfg.out) / f"sweep_{args.axis}" / "grid.csv").read_text(), end="")
    return 0 if all(a.complete for a in grid.values()) else 1


def cmd_report(args) -> int:
    rep = H.report(args.artifact)
    print(rep["text"], end="")
    return 1 if rep["partial"] else 0


def cmd_partition(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0]
    plan, _, _ = H.build_scenario(cfg, H.load_store(cfg), seed)
    text = plan.to_manifest()
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        print(f"manifest -> {path}")
    else:
        print(text, end="")
    return 0


def cmd_verify(args) -> int:
    from . import oracles

    failed = 0
    for name, ok, detail in oracles.run_suite():
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    print(f"{failed} failed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedmgp")
    ap.add_argument("--data-dir", help="dataset directory (overrides DATA_DIR)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="run a single seed")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("run", help="run one configuration over its seeds")
    common(p)
    p.add_argument("--ablation", choices=H.ABLATIONS)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="re-run a configuration along one hyperparameter axis")
    common(p)
    p.add_argument("--ablation", choices=H.ABLATIONS)
    p.add_argument("--axis", required=True, choices=sorted(H.SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render tables from a finished run directory")
    p.add_argument("--artifact", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("partition", help="emit the scenario manifest only")
    common(p, "manifest file (stdout when omitted)")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("verify", help="run the reference-oracle suite")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.data_dir:
        os.environ["DATA_DIR"] = args.data_dir
    if not hasattr(args, "config"):
        args.config = None
    try:
        return args.func(args)
    except (H.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
