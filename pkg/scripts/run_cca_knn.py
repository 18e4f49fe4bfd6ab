#!/usr/bin/env python3
"""Latent-space classification: count-aware sampler vs Gaussian baselines.

For each replicate, fits the two-view model with the alternating sampler
on the raw counts, with the same sampler under a Gaussian likelihood, and
with a plain Gaussian MAP baseline, then scores shared-latent KNN error.

    python3 scripts/run_cca_knn.py --out results/knn --jobs 2
"""

import argparse
import json
import os
import sys

from expfamproj.cli import main as cli_main

RECIPE = "cca-knn"


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
    ap.add_argument("--override", action="append", default=[],
                    metavar="KEY=VALUE")
    args = ap.parse_args(argv)

    os.makedirs(args.out, exist_ok=True)
    config = {"recipe": RECIPE, "overrides": parse_overrides(args.override)}
    cfg_path = os.path.join(args.out, "config.json")
    with open(cfg_path, "w") as fh:
        json.dump(config, fh, indent=1)
    return cli_main(["experiment", "--config", cfg_path, "--out", args.out,
                     "--seed", str(args.seed), "--jobs", str(args.jobs)])


if __name__ == "__main__":
    sys.exit(run())
