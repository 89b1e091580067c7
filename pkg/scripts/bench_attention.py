#!/usr/bin/env python3
"""Time the masked kernel against its own dense path.

Runs attn-bench over a size/sparsity grid that ends at N=4096 with a
95%-sparse mask, then prints the measured speedups from the timings
sidecar. Block counts and deviations land in bench.csv (deterministic);
wall-clock numbers land in timings.json (machine-dependent).

Produces (under --out, default results/bench):
  bench.csv      per-configuration block accounting and max deviation
  timings.json   best-of-N wall-clock per call and dense/sparse speedup
"""

import argparse
import json
import os
import sys

from sparseattn_lab.cli import main as cli_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/bench")
    ap.add_argument("--sizes", default="1024,2048,4096")
    ap.add_argument("--sparsities", default="0.0,0.5,0.9,0.95")
    ap.add_argument("--block", type=int, default=128)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    code = cli_main([
        "attn-bench",
        "--out", args.out,
        "--sizes", args.sizes,
        "--sparsities", args.sparsities,
        "--b-q", str(args.block),
        "--b-kv", str(args.block),
        "--reps", str(args.reps),
        "--seed", str(args.seed),
    ])
    if code != 0:
        return code

    with open(os.path.join(args.out, "timings.json")) as f:
        timings = json.load(f)
    print("\nn       sparsity   speedup")
    for entry in timings["entries"]:
        print(f"{entry['n']:<8}{entry['sparsity']:<11.4f}{entry['speedup']:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(run())
