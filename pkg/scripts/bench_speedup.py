"""Planner speed-up against the unguided baseline, at one threshold and across a sweep.

    python3 scripts/bench_speedup.py --oracle --scenes 200 --out-dir runs/bench_oracle
    python3 scripts/bench_speedup.py --model runs/desk/model/model.ckpt --objects 3:6 --out-dir runs/bench_model

With --oracle the planner sees ground-truth relevance, which bounds what any
classifier can buy.
"""
import argparse
import os
import sys

from relplan.cli import main as relplan


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--oracle", action="store_true")
    src.add_argument("--model")
    ap.add_argument("--scenes", type=int, default=200)
    ap.add_argument("--objects", default="10")
    ap.add_argument("--predicate", default="same-plane")
    ap.add_argument("--beta", default="0.5")
    ap.add_argument("--beta-sweep", default="0:1:11")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--out-dir", default="runs/bench")
    args = ap.parse_args()
    argv = ["bench", "--modes", "baseline,admissible,nonadmissible", "--scenes", str(args.scenes),
            "--objects", args.objects, "--predicate", args.predicate, "--beta", args.beta,
            "--beta-sweep", args.beta_sweep, "--seed", str(args.seed), "--threads", str(args.threads),
            "--out-dir", args.out_dir]
    argv += ["--oracle"] if args.oracle else ["--model", args.model]
    print("$ relplan " + " ".join(argv), flush=True)
    sys.exit(relplan(argv))


if __name__ == "__main__":
    main()
