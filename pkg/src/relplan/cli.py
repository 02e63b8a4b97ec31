"""Command-line entry point: gen, train, eval, plan and bench.

Settings resolve as defaults < ``--config`` file < RELPLAN_SEED (seed only)
< explicit flags. The config file is either ``key=value`` lines or a
``manifest.json`` written by an earlier run, which makes every run
reproducible from its manifest.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from relplan import __version__
from relplan.errors import PlacementExhausted, RelplanError
from relplan.labeler import (
    SampleSet,
    choose_goal_pair,
    generate_dataset,
    label_scene,
    load_dataset,
    scene_seed,
)
from relplan.net import (
    METRIC_COLUMNS,
    NetConfig,
    TrainConfig,
    load_checkpoint,
    predict_samples,
    rates,
    save_checkpoint,
    train_batch_polling,
)
from relplan.planner import (
    HeuristicMode,
    OracleScorer,
    Variant,
    compare,
    plan,
)
from relplan.scene import (
    SAME_PLANE_KINDS,
    GoalPredicate,
    PredicateKind,
    goal_to_dict,
    sample_scene,
    scene_to_dict,
)

SCHEMA = {
    "manifest": "relplan.manifest/1",
    "eval": "relplan.eval/1",
    "sweep_eval": "relplan.eval_sweep/1",
    "metrics": "relplan.train_metrics/1",
    "bench_rows": "relplan.bench_rows/1",
    "bench_summary": "relplan.bench_summary/1",
    "sweep_bench": "relplan.bench_sweep/1",
    "plan": "relplan.plan/1",
}

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --- parsing helpers ---------------------------------------------------------


def parse_kinds(text: str) -> list[PredicateKind]:
    out: list[PredicateKind] = []
    for tok in str(text).split(","):
        tok = tok.strip()
        if tok == "same-plane":
            out.extend(SAME_PLANE_KINDS)
        elif tok == "all":
            out.extend(PredicateKind)
        elif tok:
            out.append(PredicateKind.parse(tok))
    if not out:
        raise UsageError("no predicate given")
    return list(dict.fromkeys(out))


def parse_range(text: str) -> tuple[int, int]:
    parts = str(text).split(":")
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    if len(parts) == 2:
        return int(parts[0]), int(parts[1])
    raise UsageError(f"bad range {text!r}; expected N or LO:HI")


def parse_sweep(text: str) -> list[float]:
    try:
        lo, hi, steps = text.split(":")
        lo_f, hi_f, n = float(lo), float(hi), int(steps)
    except ValueError as exc:
        raise UsageError(f"bad sweep {text!r}; expected lo:hi:steps") from exc
    if n < 1 or not 0.0 <= lo_f <= 1.0 or not 0.0 <= hi_f <= 1.0:
        raise UsageError("sweep needs steps >= 1 and bounds within [0, 1]")
    return [round(float(b), 12) for b in np.linspace(lo_f, hi_f, n)]


def parse_eta(text: str) -> dict[str, float]:
    out = {}
    for item in filter(None, str(text).split(",")):
        k, _, v = item.partition("=")
        out[PredicateKind.parse(k.strip()).value] = float(v)
    return out


def read_config(path: str) -> dict[str, str]:
    """key=value lines (``#`` comments), or the ``config`` block of a manifest."""
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".json":
        data = json.loads(text)
        cfg = data.get("config", data)
        return {k: "" if v is None else str(v) for k, v in cfg.items()}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


# --- parser ------------------------------------------------------------------

# (name, type, default, help); type str means "kept as text and parsed later"
_COMMON = [
    ("seed", int, 0, "global seed (RELPLAN_SEED overrides the config file)"),
    ("out_dir", str, ".", "directory for outputs and manifest.json"),
    ("threads", int, None, "worker processes (default: available cores)"),
]
_OPTIONS: dict[str, list[tuple[str, Any, Any, str]]] = {
    "gen": [
        ("predicate", str, "same-plane", "predicate kinds, comma separated (or same-plane / all)"),
        ("scenes", int, 100, "number of scenes to sample"),
        ("objects", str, "3:10", "objects per scene, N or LO:HI"),
        ("k_max", int, 8, "maximum skeleton length"),
        ("out", str, "dataset.tsv.gz", "dataset file name inside out-dir"),
    ],
    "train": [
        ("data", str, None, "training dataset path(s), comma separated"),
        ("heldout", str, "", "held-out dataset path(s) for per-epoch accuracy"),
        ("predicate", str, "", "restrict training to these kinds"),
        ("epochs", int, 20, "epochs to run"),
        ("learning_rate", float, 1e-5, "Adam step size"),
        ("batch_size", int, 50, "samples per batch"),
        ("eta", str, "", "positive-class weights, e.g. on-left=0.86,on-top=0.66"),
        ("beta", float, 0.5, "decision threshold for held-out accuracy"),
        ("dim", int, 64, "embedding width"),
        ("resume", str, "", "checkpoint to resume from"),
    ],
    "eval": [
        ("model", str, None, "checkpoint path"),
        ("data", str, None, "dataset path(s), comma separated"),
        ("beta", float, 0.5, "decision threshold"),
        ("beta_sweep", str, "", "lo:hi:steps threshold sweep"),
        ("oracle", bool, False, "score with the ground-truth labels instead of a model"),
    ],
    "plan": [
        ("predicate", str, "on-left", "goal predicate kind"),
        ("objects", int, 6, "objects in the scene"),
        ("scene_seed", int, None, "scene seed (default: derived from --seed)"),
        ("subject", int, None, "goal subject id (default: random)"),
        ("reference", int, None, "goal reference id (default: random)"),
        ("mode", str, "baseline", "baseline, admissible or nonadmissible"),
        ("beta", float, 0.5, "decision threshold for guided modes"),
        ("model", str, "", "checkpoint for guided modes"),
        ("oracle", bool, False, "use ground-truth labels as predictions"),
        ("k_max", int, 8, "maximum skeleton length"),
    ],
    "bench": [
        ("modes", str, "baseline,admissible", "comma separated planner modes"),
        ("predicate", str, "same-plane", "goal kinds, cycled over scenes"),
        ("scenes", int, 50, "benchmark scenes (baseline-solvable only)"),
        ("objects", str, "10", "objects per scene, N or LO:HI"),
        ("beta", float, 0.5, "decision threshold for guided modes"),
        ("beta_sweep", str, "", "lo:hi:steps threshold sweep for guided modes"),
        ("model", str, "", "checkpoint for guided modes"),
        ("oracle", bool, False, "use ground-truth labels as predictions"),
        ("k_max", int, 8, "maximum skeleton length"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relplan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"relplan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in _OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value file or manifest.json")
        for key, typ, _, help_ in opts + _COMMON:
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_)
            else:
                p.add_argument(flag, dest=key, type=typ, default=None, help=help_)
    return parser


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, config file, RELPLAN_SEED and flags into one dict."""
    opts = _OPTIONS[args.command] + _COMMON
    cfg = {key: default for key, _, default, _ in opts}
    if args.config:
        for k, v in read_config(args.config).items():
            match = [o for o in opts if o[0] == k]
            if not match:
                continue  # manifests also carry fields of no interest here
            typ = match[0][1]
            if typ is bool:
                cfg[k] = v.lower() in ("1", "true", "yes")
            elif v == "" and typ is not str:
                cfg[k] = None
            else:
                cfg[k] = typ(v)
    env_seed = os.environ.get("RELPLAN_SEED")
    if env_seed:
        cfg["seed"] = int(env_seed)
    for key, *_ in opts:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["threads"] is None:
        cfg["threads"] = os.cpu_count() or 1
    return cfg


def write_manifest(out_dir: Path, command: str, cfg: dict) -> None:
    manifest = {
        "schema": SCHEMA["manifest"],
        "tool": "relplan",
        "version": __version__,
        "command": command,
        "config": {k: cfg[k] for k in sorted(cfg)},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, schema: str, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# schema={schema}\n")
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def _paths(text: str | None) -> list[str]:
    return [p for p in (text or "").split(",") if p]


# --- subcommands ----------------------------------------------------------------


def cmd_gen(cfg: dict, out_dir: Path) -> int:
    if cfg["scenes"] < 1:
        raise UsageError("--scenes must be >= 1")
    kinds = parse_kinds(cfg["predicate"])
    lo, hi = parse_range(cfg["objects"])
    out_path = out_dir / cfg["out"]
    stats = generate_dataset(cfg["scenes"], kinds, (lo, hi), cfg["seed"], out_path, cfg["k_max"], cfg["threads"])
    print(stats.table())
    print(f"wrote {out_path} ({stats.total} samples)")
    return EXIT_OK


def _load_many(paths: list[str]):
    if not paths:
        return None
    sets = [load_dataset(p) for p in paths]
    if len(sets) == 1:
        return sets[0]
    return _concat(sets)


def _concat(sets):
    images, views, cols = [], [], {k: [] for k in ("image_idx", "subject_idx", "reference_idx", "query_idx")}
    n_img = n_view = 0
    for s in sets:
        images.append(s.images)
        views.append(s.views)
        cols["image_idx"].append(s.image_idx + n_img)
        for k in ("subject_idx", "reference_idx", "query_idx"):
            cols[k].append(getattr(s, k) + n_view)
        n_img += len(s.images)
        n_view += len(s.views)
    cat = np.concatenate
    return SampleSet(
        cat(images), cat(views), cat(cols["image_idx"]), cat(cols["subject_idx"]), cat(cols["reference_idx"]),
        cat(cols["query_idx"]), cat([s.labels for s in sets]), cat([s.kinds for s in sets]),
        cat([s.scene_ids for s in sets]), cat([s.query_ids for s in sets]),
    )


def cmd_train(cfg: dict, out_dir: Path) -> int:
    if not cfg["data"]:
        raise UsageError("--data is required")
    data = _load_many(_paths(cfg["data"]))
    train_sets = data.by_predicate()
    if cfg["predicate"]:
        wanted = parse_kinds(cfg["predicate"])
        missing = [k.cli_name for k in wanted if k not in train_sets]
        if missing:
            raise RelplanError(f"no training data for: {', '.join(missing)}")
        train_sets = {k: v for k, v in train_sets.items() if k in wanted}
    held = _load_many(_paths(cfg["heldout"]))
    heldout = held.by_predicate() if held is not None else None

    tc = TrainConfig(cfg["learning_rate"], cfg["batch_size"], parse_eta(cfg["eta"]), cfg["beta"], cfg["epochs"], cfg["seed"])
    ckpt_path = out_dir / "model.ckpt"
    metrics_path = out_dir / "metrics.csv"
    params = adam = None
    start = 0
    if cfg["resume"]:
        params, adam, start = load_checkpoint(cfg["resume"])
    elif metrics_path.exists():
        metrics_path.unlink()

    if not metrics_path.exists():
        _write_csv(metrics_path, SCHEMA["metrics"], METRIC_COLUMNS, [])

    def on_epoch(epoch, p, a, rows):
        save_checkpoint(ckpt_path, p, a, epoch)
        with open(metrics_path, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, lineterminator="\n")
            for r in rows:
                w.writerow({k: _fmt(v) for k, v in r.to_row().items()})
        acc = ", ".join(f"{r.predicate}: loss {r.loss:.4f} acc {r.total_accuracy:.3f}" for r in rows)
        print(f"epoch {epoch}: {acc}", flush=True)

    params, adam, _ = train_batch_polling(
        train_sets, tc, params, adam, start, heldout, NetConfig(dim=cfg["dim"]), on_epoch
    )
    if cfg["epochs"] == 0:
        save_checkpoint(ckpt_path, params, adam, start)
    print(f"wrote {ckpt_path} and {metrics_path}")
    return EXIT_OK


SWEEP_EVAL_COLUMNS = ["beta", "true_rel", "true_irrel", "total", "false_irrel"]


def cmd_eval(cfg: dict, out_dir: Path) -> int:
    if not cfg["data"] or not (cfg["model"] or cfg["oracle"]):
        raise UsageError("--data and one of --model / --oracle are required")
    data = _load_many(_paths(cfg["data"]))
    if cfg["oracle"]:
        probs = data.labels.astype(float)
    else:
        probs = predict_samples(load_checkpoint(cfg["model"])[0], data)
    kinds = list(PredicateKind)
    report: dict[str, Any] = {"schema": SCHEMA["eval"], "beta": cfg["beta"], "predicates": {}}
    for ki in np.unique(data.kinds):
        rows = data.kinds == ki
        report["predicates"][kinds[int(ki)].cli_name] = rates(probs[rows], data.labels[rows], cfg["beta"]).to_dict()
    report["total"] = rates(probs, data.labels, cfg["beta"]).to_dict()
    (out_dir / "eval.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    for name, r in list(report["predicates"].items()) + [("total", report["total"])]:
        print(
            f"{name:<10} true rel. {r['true_relevant_rate']:.3f}  true irrel. {r['true_irrelevant_rate']:.3f}  "
            f"total {r['total_accuracy']:.3f}"
        )
    if cfg["beta_sweep"]:
        sweep_rows = []
        for beta in parse_sweep(cfg["beta_sweep"]):
            r = rates(probs, data.labels, beta)
            sweep_rows.append(
                {"beta": beta, "true_rel": r.true_relevant_rate, "true_irrel": r.true_irrelevant_rate,
                 "total": r.total_accuracy, "false_irrel": r.false_irrelevant_rate}
            )
        _write_csv(out_dir / "sweep.csv", SCHEMA["sweep_eval"], SWEEP_EVAL_COLUMNS, sweep_rows)
        print(f"wrote {out_dir / 'sweep.csv'} ({len(sweep_rows)} rows)")
    return EXIT_OK


def _modes(text: str, beta: float) -> list[HeuristicMode]:
    try:
        return [HeuristicMode(Variant(m.strip()), beta) for m in text.split(",") if m.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _model_for(cfg: dict, guided: bool):
    if not guided:
        return None
    if cfg["oracle"]:
        return "oracle"
    if not cfg["model"]:
        raise UsageError("guided modes need --model or --oracle")
    return load_checkpoint(cfg["model"])[0]


def cmd_plan(cfg: dict, out_dir: Path) -> int:
    kind = PredicateKind.parse(cfg["predicate"])
    mode = _modes(cfg["mode"], cfg["beta"])
    if len(mode) != 1:
        raise UsageError("plan takes exactly one --mode")
    seed = cfg["scene_seed"] if cfg["scene_seed"] is not None else scene_seed(cfg["seed"], 0)
    scene = sample_scene(cfg["objects"], seed, stack_one=kind is PredicateKind.OnTop)
    rng = np.random.default_rng([seed & (2**63 - 1), 1])
    subject, reference = choose_goal_pair(scene, [kind], rng)
    subject = cfg["subject"] if cfg["subject"] is not None else subject
    reference = cfg["reference"] if cfg["reference"] is not None else reference
    g = GoalPredicate(kind, subject, reference)
    model = _model_for(cfg, mode[0].variant is not Variant.Baseline)
    if model == "oracle":
        manipulated = label_scene(scene, g, cfg["k_max"]) or frozenset()
        model = OracleScorer({(scene.rng_seed, g): manipulated})
    m = plan(scene, g, mode[0], model, cfg["k_max"])
    out = {
        "schema": SCHEMA["plan"],
        "scene": scene_to_dict(scene),
        "goal": goal_to_dict(g),
        "mode": mode[0].variant.value,
        "beta": mode[0].beta,
        "solved": m.solved,
        "skeleton": str(m.skeleton) if m.skeleton else None,
        "result": m.result.to_dict() if m.result else None,
        "feasibility_checks": m.feasibility_checks,
        "skeletons_enumerated": m.skeletons_enumerated,
        "used_fallback": m.used_fallback,
        "relevant_set_size": m.relevant_set_size,
    }
    (out_dir / "plan.json").write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    print(f"goal {kind.cli_name}({subject}, {reference}) on {cfg['objects']} objects, seed {seed}")
    print(f"solved={m.solved} skeleton={out['skeleton']} checks={m.feasibility_checks}")
    return EXIT_OK if m.solved else EXIT_ERROR


@dataclass
class BenchScene:
    index: int
    scene: Any
    goal: GoalPredicate
    manipulated: frozenset


def bench_scenes(n: int, kinds: Sequence[PredicateKind], objects: tuple[int, int], seed: int, k_max: int):
    """The first ``n`` seeded scenes whose goal the baseline planner solves."""
    out: list[BenchScene] = []
    i = 0
    limit = 50 * n + 100
    while len(out) < n:
        if i >= limit:
            raise RelplanError(f"only {len(out)} solvable scenes found in {limit} draws")
        kind = kinds[i % len(kinds)]
        rng = np.random.default_rng([seed & (2**63 - 1), i, 2])
        n_obj = int(rng.integers(objects[0], objects[1] + 1))
        try:
            scene = sample_scene(n_obj, scene_seed(seed, i), stack_one=kind is PredicateKind.OnTop)
        except PlacementExhausted:
            i += 1
            continue
        subject, reference = choose_goal_pair(scene, [kind], rng)
        g = GoalPredicate(kind, subject, reference)
        manipulated = label_scene(scene, g, k_max)
        if manipulated is not None:
            out.append(BenchScene(i, scene, g, manipulated))
        i += 1
    return out


BENCH_COLUMNS = ["scene_id", "mode", "checks", "wall_ms", "solved", "fallback", "set_size"]
SWEEP_BENCH_COLUMNS = ["beta", "mode", "mean_checks", "speedup_checks", "speedup_wall", "solve_rate", "fallback_rate",
                       "mean_set_size"]


def cmd_bench(cfg: dict, out_dir: Path) -> int:
    if cfg["scenes"] < 1:
        raise UsageError("--scenes must be >= 1")
    kinds = parse_kinds(cfg["predicate"])
    modes = _modes(cfg["modes"], cfg["beta"])
    if not modes:
        raise UsageError("no modes given")
    guided = any(m.variant is not Variant.Baseline for m in modes)
    model = _model_for(cfg, guided or bool(cfg["beta_sweep"]))
    items = bench_scenes(cfg["scenes"], kinds, parse_range(cfg["objects"]), cfg["seed"], cfg["k_max"])
    scenes = [b.scene for b in items]
    goals = [b.goal for b in items]
    if model == "oracle":
        model = OracleScorer({(b.scene.rng_seed, b.goal): b.manipulated for b in items})

    cmp = compare(scenes, goals, modes, model, cfg["k_max"], threads=cfg["threads"])
    rows = [dict(r, scene_id=items[r["scene_id"]].index) for r in cmp.rows]
    _write_csv(out_dir / "bench.csv", SCHEMA["bench_rows"], BENCH_COLUMNS, rows)
    summary = {"schema": SCHEMA["bench_summary"], "n_scenes": len(items), "modes": [s.to_dict() for s in cmp.summaries]}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    for s in cmp.summaries:
        line = f"{s.mode:<16} checks {s.mean_checks:8.2f} +- {s.checks_ci:.2f}  wall {s.mean_wall_ms:8.1f} ms  solved {s.solve_rate:.3f}"
        if s.speedup_checks is not None:
            line += f"  speed-up checks {100 * s.speedup_checks:.1f}%  wall {100 * s.speedup_wall:.1f}%"
        print(line)

    if cfg["beta_sweep"]:
        guided_variants = [m.variant for m in modes if m.variant is not Variant.Baseline] or [Variant.NonAdmissible]
        sweep_modes = [HeuristicMode(Variant.Baseline)] + [
            HeuristicMode(v, b) for b in parse_sweep(cfg["beta_sweep"]) for v in guided_variants
        ]
        sw = compare(scenes, goals, sweep_modes, model, cfg["k_max"], threads=cfg["threads"])
        sweep_rows = [
            {"beta": s.beta, "mode": s.mode.split("@")[0], "mean_checks": s.mean_checks, "speedup_checks": s.speedup_checks,
             "speedup_wall": s.speedup_wall, "solve_rate": s.solve_rate, "fallback_rate": s.fallback_rate,
             "mean_set_size": s.mean_set_size}
            for s in sw.summaries[1:]
        ]
        _write_csv(out_dir / "sweep.csv", SCHEMA["sweep_bench"], SWEEP_BENCH_COLUMNS, sweep_rows)
        print(f"wrote {out_dir / 'sweep.csv'} ({len(sweep_rows)} rows)")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "plan": cmd_plan, "bench": cmd_bench}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        if cfg.get("scenes", 1) < 1:
            raise UsageError("--scenes must be >= 1")
        out_dir = Path(cfg["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(out_dir, args.command, cfg)
        return COMMANDS[args.command](cfg, out_dir)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"relplan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RelplanError, OSError, ValueError, KeyError) as exc:
        print(f"relplan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
