#!/usr/bin/env python3
"""Train with each fusion stage disabled in turn and compare test AUC,
mirroring the stage-removal ablation table.

Usage: python3 scripts/run_ablations.py [out_dir] [--epochs N]
"""

import argparse
import sys
from pathlib import Path

from mtfl.cli import run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir", nargs="?", default="ablation_run")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    root = Path(args.out_dir)
    data = root / "data"
    code = run(["synth", "--out-dir", str(data), "--normal", "40",
                "--abnormal", "40", "--d", "16", "--seed", str(args.seed)])
    if code != 0:
        sys.exit(code)

    for variant in ("full", "pfl", "ltl", "gtl", "ff"):
        out = root / f"run_{variant}"
        scores = root / f"scores_{variant}"
        train_argv = ["train", "--manifest", str(data / "train_manifest.csv"),
                      "--out-dir", str(out), "--epochs", str(args.epochs),
                      "--lr", "1e-3", "--batch-half", "8",
                      "--seed", str(args.seed)]
        if variant != "full":
            train_argv.append(f"--disable-{variant}")
        for argv in (train_argv,
                     ["score", "--checkpoint", str(out / "final.mtfc"),
                      "--manifest", str(data / "test_manifest.csv"),
                      "--out-dir", str(scores)]):
            code = run(argv)
            if code != 0:
                sys.exit(code)
        print(f"--- variant: {variant} ---")
        code = run(["eval", "--scores-dir", str(scores),
                    "--manifest", str(data / "test_manifest.csv")])
        if code != 0:
            sys.exit(code)


if __name__ == "__main__":
    main()
