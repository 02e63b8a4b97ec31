"""Label distribution of freshly generated datasets, one table per predicate family.

    python3 scripts/label_stats.py --scenes 2000 --out-dir runs/labels
"""
import argparse
import json
import os
from pathlib import Path

from relplan.labeler import generate_dataset
from relplan.scene import SAME_PLANE_KINDS, PredicateKind


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=2000)
    ap.add_argument("--objects", default="3:10")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--out-dir", default="runs/labels")
    args = ap.parse_args()
    lo, hi = (int(x) for x in args.objects.split(":"))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {}
    for name, kinds in (("same-plane", SAME_PLANE_KINDS), ("on-top", (PredicateKind.OnTop,))):
        stats = generate_dataset(args.scenes, kinds, (lo, hi), args.seed, out / f"{name}.tsv.gz", threads=args.threads)
        print(f"== {name}: {args.scenes} scenes, {lo}-{hi} objects, seed {args.seed}")
        print(stats.table())
        print(f"relevant fraction {stats.relevant_fraction():.4f}\n")
        report[name] = stats.to_dict()
    (out / "label_stats.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
