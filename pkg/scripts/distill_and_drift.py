#!/usr/bin/env python3
"""Full distillation desk run, then the fine-tuning drift comparison.

Three stages, all through the distill-train subcommand:
  1. Pretrain a small dense denoiser and distill a ~90%-sparse student
     against it with the velocity objective (500 steps by default).
  2. Reusing the stage-1 teacher checkpoint, fine-tune a dense copy on
     frequency-shifted data with the plain diffusion objective.
  3. Distill a sparse student on the same shifted data.

Stage 1 shows the student closing the gap to its teacher. Stages 2 and 3
compare how far each arm ends up from the frozen teacher on held-out
shifted data: the diffusion arm chases the new data and drifts away, the
distillation arm stays anchored.

Produces (under --out-root, default results/distill):
  vd/        student + teacher checkpoints, stats.csv, summary.json
  diffusion_shifted/, vd_shifted/   the two drift arms
"""

import argparse
import json
import os
import sys

from sparseattn_lab.cli import main as cli_main


def summary(out_dir):
    with open(os.path.join(out_dir, "summary.json")) as f:
        return json.load(f)


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-root", default="results/distill")
    ap.add_argument("--teacher-steps", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--drift-steps", type=int, default=300)
    ap.add_argument("--shift", type=float, default=1.5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    vd_dir = os.path.join(args.out_root, "vd")
    code = cli_main([
        "distill-train", "--out", vd_dir, "--pretrain-teacher",
        "--teacher-steps", str(args.teacher_steps),
        "--steps", str(args.steps), "--seed", str(args.seed),
    ])
    if code != 0:
        return code
    teacher_ck = os.path.join(vd_dir, f"teacher_{args.teacher_steps:06d}")

    arms = {}
    for objective in ("diffusion", "vd"):
        out = os.path.join(args.out_root, f"{objective}_shifted")
        code = cli_main([
            "distill-train", "--out", out,
            "--teacher", teacher_ck,
            "--objective", objective,
            "--steps", str(args.drift_steps),
            "--shift", str(args.shift),
            "--seed", str(args.seed),
        ])
        if code != 0:
            return code
        arms[objective] = summary(out)["teacher_deviation_final"]

    stage1 = summary(vd_dir)
    print("\nstage 1: sparse student vs teacher "
          f"{stage1['teacher_deviation_initial']:.4f} -> {stage1['teacher_deviation_final']:.4f}")
    print(f"shifted-data arms, deviation from frozen teacher after {args.drift_steps} steps:")
    print(f"  diffusion (dense fine-tune): {arms['diffusion']:.4f}")
    print(f"  velocity distillation:       {arms['vd']:.4f}")
    anchored = arms["vd"] < arms["diffusion"]
    print("distillation arm stayed closer to the teacher" if anchored
          else "WARNING: diffusion arm ended closer; direction not reproduced")
    return 0 if anchored else 1


if __name__ == "__main__":
    sys.exit(run())
