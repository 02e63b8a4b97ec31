"""Heuristic-guided planning: baseline, admissible and non-admissible search."""
from __future__ import annotations

import enum
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import AbstractSet, Callable, Mapping, Protocol, Sequence, Union

import numpy as np

from relplan.errors import ModelPredicateMissing
from relplan.geometry import FeasibilityResult, PlacementProblem, check_feasible
from relplan.net import ModelParams, decide_relevance, predict_batch
from relplan.scene import (
    DEFAULT_MARGIN,
    GoalPredicate,
    Scene,
    rasterize_scene,
    render_canonical_view,
)
from relplan.symbolic import DEFAULT_K_MAX, Skeleton, enumerate_skeletons


class Variant(str, enum.Enum):
    Baseline = "baseline"
    Admissible = "admissible"
    NonAdmissible = "nonadmissible"


@dataclass(frozen=True)
class HeuristicMode:
    variant: Variant = Variant.Baseline
    beta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


@dataclass
class PlanMetrics:
    feasibility_checks: int = 0
    skeletons_enumerated: int = 0
    wall_time: float = 0.0
    solved: bool = False
    used_fallback: bool = False
    relevant_set_size: int = 0
    skeleton: Skeleton | None = None
    result: FeasibilityResult | None = None


@dataclass
class SearchOutcome:
    skeleton: Skeleton | None
    result: FeasibilityResult | None
    checks: int
    enumerated: int

    @property
    def solved(self) -> bool:
        return self.skeleton is not None


@dataclass(frozen=True)
class SolverSettings:
    margin: float = DEFAULT_MARGIN
    n_samples: int = 256
    gn_iters: int = 20
    n_restarts: int = 4


def search(
    scene: Scene,
    g: GoalPredicate,
    allowed: AbstractSet[int],
    k_max: int = DEFAULT_K_MAX,
    settings: SolverSettings | None = None,
) -> SearchOutcome:
    """First feasible skeleton over ``allowed`` in enumeration order."""
    s = settings or SolverSettings()
    checks = enumerated = 0
    for sk in enumerate_skeletons(scene, g, allowed, k_max):
        enumerated += 1
        checks += 1
        res = check_feasible(PlacementProblem(scene, sk, g, s.margin, s.n_samples, s.gn_iters, s.n_restarts))
        if res.feasible:
            return SearchOutcome(sk, res, checks, enumerated)
    return SearchOutcome(None, None, checks, enumerated)


class RelevanceScorer(Protocol):
    def __call__(self, scene: Scene, g: GoalPredicate) -> Mapping[int, float]: ...


class OracleScorer:
    """Perfect predictor: probability 1 for labeled-relevant objects, 0 otherwise.

    ``labels`` is keyed by (scene seed, goal). Unknown pairs score all zeros.
    """

    def __init__(self, labels: Mapping[tuple[int, GoalPredicate], AbstractSet[int]]):
        self.labels = {k: frozenset(v) for k, v in labels.items()}

    def __call__(self, scene: Scene, g: GoalPredicate) -> dict[int, float]:
        relevant = self.labels.get((scene.rng_seed, g), frozenset())
        return {o: 1.0 if o in relevant else 0.0 for o in scene.ids}


def oracle_scorer(labels: Mapping[tuple[int, GoalPredicate], AbstractSet[int]]) -> RelevanceScorer:
    return OracleScorer(labels)


def model_scorer(params, view_index: int = 0) -> RelevanceScorer:
    """Wrap trained network parameters as a scorer (one forward pass per object)."""
    def score(scene: Scene, g: GoalPredicate) -> dict[int, float]:
        if not params.covers(g.kind):
            raise ModelPredicateMissing(f"model was not trained for {g.kind.value}")
        image = rasterize_scene(scene)
        specs = scene.specs()
        goal_views = (
            render_canonical_view(specs[g.subject], view_index),
            render_canonical_view(specs[g.reference], view_index),
        )
        ids = scene.ids
        queries = np.stack([render_canonical_view(specs[o], view_index) for o in ids])
        probs = predict_batch(
            params,
            np.broadcast_to(image, (len(ids),) + image.shape),
            np.broadcast_to(goal_views[0], queries.shape),
            np.broadcast_to(goal_views[1], queries.shape),
            queries,
            g.kind,
        )
        return {o: float(p) for o, p in zip(ids, probs)}

    return score


Scorer = Union[RelevanceScorer, Callable[[Scene, GoalPredicate], Mapping[int, float]]]


def _as_scorer(model) -> RelevanceScorer:
    if isinstance(model, ModelParams):
        return model_scorer(model)
    return model


def predict_relevant_set(scene: Scene, g: GoalPredicate, model, beta: float) -> frozenset[int]:
    probs = _as_scorer(model)(scene, g)
    chosen = {o for o, p in probs.items() if decide_relevance(p, beta)}
    chosen.add(g.subject)
    return frozenset(chosen)


def plan(
    scene: Scene,
    g: GoalPredicate,
    mode: HeuristicMode,
    model=None,
    k_max: int = DEFAULT_K_MAX,
    settings: SolverSettings | None = None,
) -> PlanMetrics:
    t0 = time.perf_counter()
    metrics = PlanMetrics()
    everything = frozenset(scene.ids)
    if mode.variant is Variant.Baseline:
        allowed = everything
    else:
        if model is None:
            raise ValueError("guided modes need a model")
        allowed = predict_relevant_set(scene, g, model, mode.beta)
    metrics.relevant_set_size = len(allowed)

    out = search(scene, g, allowed, k_max, settings)
    metrics.feasibility_checks += out.checks
    metrics.skeletons_enumerated += out.enumerated
    if not out.solved and mode.variant is Variant.Admissible and allowed != everything:
        metrics.used_fallback = True
        out = search(scene, g, everything, k_max, settings)
        metrics.feasibility_checks += out.checks
        metrics.skeletons_enumerated += out.enumerated
    metrics.solved = out.solved
    metrics.skeleton, metrics.result = out.skeleton, out.result
    metrics.wall_time = time.perf_counter() - t0
    return metrics


# 67% two-sided normal interval, as used for the reported runtimes
CI_Z = 0.9741


@dataclass
class ModeSummary:
    mode: str
    beta: float
    n: int
    mean_checks: float
    checks_ci: float
    mean_wall_ms: float
    wall_ci_ms: float
    solve_rate: float
    fallback_rate: float
    mean_set_size: float
    speedup_checks: float | None = None
    speedup_wall: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Comparison:
    rows: list[dict] = field(default_factory=list)
    summaries: list[ModeSummary] = field(default_factory=list)

    def summary(self, mode: str) -> ModeSummary:
        for s in self.summaries:
            if s.mode == mode:
                return s
        raise KeyError(mode)


def _mean_ci(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if len(arr) == 0:
        return math.nan, math.nan
    if len(arr) == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(CI_Z * arr.std(ddof=1) / math.sqrt(len(arr)))


def speedup(guided_mean: float, baseline_mean: float) -> float:
    return 1.0 - guided_mean / baseline_mean


def _plan_all_modes(job) -> list[PlanMetrics]:
    scene, g, modes, model, k_max, settings = job
    return [plan(scene, g, mode, model, k_max, settings) for mode in modes]


def compare(
    scenes: Sequence[Scene],
    goals: Sequence[GoalPredicate],
    modes: Sequence[HeuristicMode],
    model=None,
    k_max: int = DEFAULT_K_MAX,
    settings: SolverSettings | None = None,
    threads: int = 1,
) -> Comparison:
    """Run every mode on every scene and aggregate checks, wall time and speed-up.

    With ``threads > 1`` scenes are spread over worker processes; rows keep
    scene order, so everything except wall time is independent of ``threads``.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    if len(scenes) != len(goals):
        raise ValueError("need one goal per scene")
    variants = [m.variant for m in modes]
    keys = [
        m.variant.value if variants.count(m.variant) == 1 else f"{m.variant.value}@{m.beta:g}" for m in modes
    ]
    jobs = [(scene, g, tuple(modes), model, k_max, settings) for scene, g in zip(scenes, goals)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            per_scene = list(pool.map(_plan_all_modes, jobs))
    else:
        per_scene = [_plan_all_modes(j) for j in jobs]

    cmp = Comparison()
    per_mode: dict[str, list[PlanMetrics]] = {k: [] for k in keys}
    for j, key in enumerate(keys):
        for sid, metrics in enumerate(per_scene):
            m = metrics[j]
            per_mode[key].append(m)
            cmp.rows.append(
                {
                    "scene_id": sid,
                    "mode": key,
                    "checks": m.feasibility_checks,
                    "wall_ms": round(m.wall_time * 1e3, 3),
                    "solved": int(m.solved),
                    "fallback": int(m.used_fallback),
                    "set_size": m.relevant_set_size,
                }
            )
    for mode, key in zip(modes, keys):
        ms = per_mode[key]
        mc, cc = _mean_ci([m.feasibility_checks for m in ms])
        mw, cw = _mean_ci([m.wall_time * 1e3 for m in ms])
        cmp.summaries.append(
            ModeSummary(
                key,
                mode.beta,
                len(ms),
                mc,
                cc,
                mw,
                cw,
                float(np.mean([m.solved for m in ms])),
                float(np.mean([m.used_fallback for m in ms])),
                float(np.mean([m.relevant_set_size for m in ms])),
            )
        )
    if Variant.Baseline.value in per_mode:
        base = cmp.summary(Variant.Baseline.value)
        for s in cmp.summaries:
            if s.mode != Variant.Baseline.value:
                s.speedup_checks = speedup(s.mean_checks, base.mean_checks)
                s.speedup_wall = speedup(s.mean_wall_ms, base.mean_wall_ms)
    return cmp
