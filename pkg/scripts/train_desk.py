"""Desk-scale training run: generate, train by batch polling, evaluate with a threshold sweep.

    python3 scripts/train_desk.py --out-dir runs/desk

Each step is a relplan subcommand, so every stage leaves a manifest that
reproduces it.
"""
import argparse
import os
import sys
from pathlib import Path

from relplan.cli import main as relplan


def step(argv):
    print("$ relplan " + " ".join(argv), flush=True)
    code = relplan(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=2000)
    ap.add_argument("--heldout-scenes", type=int, default=400)
    ap.add_argument("--objects", default="3:6")
    ap.add_argument("--predicate", default="same-plane")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--learning-rate", default="1e-5")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--out-dir", default="runs/desk")
    args = ap.parse_args()
    out = Path(args.out_dir)
    common = ["--threads", str(args.threads)]
    step(["gen", "--predicate", args.predicate, "--scenes", str(args.scenes), "--objects", args.objects,
          "--seed", str(args.seed), "--out-dir", str(out / "train_data")] + common)
    step(["gen", "--predicate", args.predicate, "--scenes", str(args.heldout_scenes), "--objects", args.objects,
          "--seed", str(args.seed + 1000), "--out-dir", str(out / "heldout_data")] + common)
    train_data = str(out / "train_data" / "dataset.tsv.gz")
    held_data = str(out / "heldout_data" / "dataset.tsv.gz")
    step(["train", "--data", train_data, "--heldout", held_data, "--epochs", str(args.epochs),
          "--learning-rate", args.learning_rate, "--seed", str(args.seed), "--out-dir", str(out / "model")] + common)
    step(["eval", "--model", str(out / "model" / "model.ckpt"), "--data", held_data, "--beta-sweep", "0:0.65:11",
          "--out-dir", str(out / "eval")] + common)


if __name__ == "__main__":
    main()
