#!/usr/bin/env python3
"""End-to-end desk-scale experiment: generate a synthetic dataset, train,
score the test split, and print frame-level AUC/AP.

Usage: python3 scripts/run_synthetic_pipeline.py [out_dir] [--epochs N]
"""

import argparse
import sys
from pathlib import Path

from mtfl.cli import run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir", nargs="?", default="synthetic_run")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    root = Path(args.out_dir)
    data, out, scores = root / "data", root / "run", root / "scores"
    steps = [
        ["synth", "--out-dir", str(data), "--normal", "40", "--abnormal",
         "40", "--d", "16", "--seed", str(args.seed)],
        ["train", "--manifest", str(data / "train_manifest.csv"),
         "--out-dir", str(out), "--epochs", str(args.epochs), "--lr", "1e-3",
         "--batch-half", "8", "--seed", str(args.seed)],
        ["score", "--checkpoint", str(out / "final.mtfc"),
         "--manifest", str(data / "test_manifest.csv"),
         "--out-dir", str(scores)],
        ["eval", "--scores-dir", str(scores),
         "--manifest", str(data / "test_manifest.csv"), "--per-video"],
    ]
    for argv in steps:
        print(f"$ mtfl {' '.join(argv)}")
        code = run(argv)
        if code != 0:
            sys.exit(code)


if __name__ == "__main__":
    main()
