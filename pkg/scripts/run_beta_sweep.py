#!/usr/bin/env python3
"""Held-out imputation quality across the composite prior weight.

Selects the remaining hyperparameters by the two-stage cross-validation,
then sweeps beta over a uniform grid with repeated restarts.  Runs on the
binary diagnostic table when --spect points at it, otherwise on the
synthetic stand-in (a notice is printed and recorded in the summary).

    python3 scripts/run_beta_sweep.py --out results/sweep \\
        --override n_points=11 --spect data/spect.csv
"""

import argparse
import json
import os
import sys

from expfamproj.cli import main as cli_main

RECIPE = "beta-sweep"


def parse_overrides(pairs):
    out = {}
    for pair in pairs:
        key, _, raw = pair.partition("=")
        if not _:
            raise SystemExit(f"--override expects KEY=VALUE, got {pair!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def run(argv=None):
    ap = argparse.ArgumentParser(
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=f"results/{RECIPE}")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--spect", default=None,
                    help="path to the binary feature table; synthetic "
                         "fallback when omitted")
    ap.add_argument("--override", action="append", default=[],
                    metavar="KEY=VALUE")
    args = ap.parse_args(argv)

    os.makedirs(args.out, exist_ok=True)
    config = {"recipe": RECIPE, "overrides": parse_overrides(args.override)}
    cfg_path = os.path.join(args.out, "config.json")
    with open(cfg_path, "w") as fh:
        json.dump(config, fh, indent=1)
    argv_out = ["experiment", "--config", cfg_path, "--out", args.out,
                "--seed", str(args.seed), "--jobs", str(args.jobs)]
    if args.spect:
        argv_out += ["--spect", args.spect]
    return cli_main(argv_out)


if __name__ == "__main__":
    sys.exit(run())
