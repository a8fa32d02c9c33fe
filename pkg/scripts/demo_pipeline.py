#!/usr/bin/env python3
"""End-to-end micro demo: generate a tiny dataset, train briefly, sample,
and score the result.  Finishes in a few minutes on a laptop CPU; use the
CLI directly for real runs.
"""

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from resdiff.cli import main as cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="demo_run")
    ap.add_argument("--n", type=int, default=24)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--steps", type=int, default=400)
    args = ap.parse_args()

    w = args.workdir
    run = lambda argv: sys.exit(f"step failed: {argv}") if cli(argv) != 0 else None  # noqa: E731
    run(["gen-data", "--n", str(args.n), "--size", str(args.size), "--seed", "0",
         "--out", f"{w}/data", "--force"])
    run(["train", "--data", f"{w}/data", "--out", f"{w}/train", "--steps", str(args.steps),
         "--base-width", "16", "--levels", "2", "--time-dim", "64", "--force"])
    run(["sample", "--checkpoint", f"{w}/train/ckpt_final.rdck", "--data", f"{w}/data",
         "--out", f"{w}/pred", "--seed", "1", "--force"])
    run(["eval", "--pred", f"{w}/pred", "--data", f"{w}/data", "--out", f"{w}/eval", "--force"])

    summary = json.load(open(f"{w}/eval/summary.json"))
    print("\nimage quality (per channel mean):")
    for ch, m in summary["image_quality"].items():
        print(f"  {ch:<5} mse {m['mse']['mean']:>8.2f}   psnr {m['psnr']['mean']}   "
              f"ssim {m['ssim']['mean']:.3f}")
    print("matching:")
    for ch, m in summary["matching"].items():
        print(f"  {ch:<7} f1 {m['f1']:.3f}  mean_true {m['mean_true_score']:.3f}  "
              f"PQ {m['panoptic_quality']:.3f}")


if __name__ == "__main__":
    main()
