"""Command line entry point: ``blochwkb [--config FILE] [--out DIR] [--check] SUBCOMMAND``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .blochband import GaugeError, NearDegeneracyError
from .harness import ConfigError, Experiment, load_config, run_experiment
from .semiclassics import CausticError
from .wkbfield import GridError

SUBCOMMANDS = {
    "bands": ("bands", "tabulate the band, its p-derivatives and the Berry connection (bands.csv)"),
    "perturb": ("perturb", "static corrections E1, Es2, A1, B on the band grid (perturb.csv)"),
    "verify-identities": ("identities", "Bloch-wave identity residuals (identities.json)"),
    "trajectory": ("trajectory", "integrate one bi-characteristic (traj.csv)"),
    "evolve": ("evolve", "split-step reference solve (obs.csv, optional snapshots)"),
    "prepare": ("prepare", "build single-band initial data (psi0.bin/json)"),
    "reconstruct": ("reconstruct", "WKB wavefield for a plane wave in a linear potential (psi_w.bin/json)"),
    "converge": ("converge", "eps-convergence studies (convergence.json)"),
    "special-case": ("special-case", "plane wave in a linear potential against its exact solution (special.csv)"),
}


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON or TOML config file")
    parser.add_argument("--out", default=argparse.SUPPRESS if suppress else "out", help="output directory")
    parser.add_argument("--check", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="exit nonzero when an acceptance threshold is violated")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blochwkb", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp, suppress=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        exp = Experiment(SUBCOMMANDS[args.command][0], cfg, Path(args.out))
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        summary, report = run_experiment(exp)
    except (GaugeError, NearDegeneracyError, CausticError, GridError, ArithmeticError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    for item in report.items:
        flag = "PASS" if item["pass"] else "FAIL"
        print(f"{flag}  {item['name']}: {item['value']} (threshold {item['threshold']})")
    print(json.dumps({"experiment": exp.kind, "out": str(exp.output_dir), "passed": report.passed,
                      "seconds": round(summary["seconds"], 3)}))
    if args.check and not report.passed:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
