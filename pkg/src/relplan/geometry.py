"""Continuous layer: placement sampling plus Gauss-Newton refinement.

A skeleton is feasible when every Place action admits a collision-free pose
and the final configuration satisfies the goal predicate with all inequality
residuals at or below ``VIOLATION_TOL``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from relplan.errors import InfeasibleResult, NonFiniteResidual, UnknownObject
from relplan.scene import (
    DEFAULT_MARGIN,
    GoalPredicate,
    Pose2,
    PredicateKind,
    Scene,
)
from relplan.symbolic import ActionKind, Skeleton, format_skeleton, theta

VIOLATION_TOL = 1e-6
FD_STEP = 1e-5
COST_WEIGHT = 1e-3
# Residuals are driven to -SAFETY_OFFSET so the cost term cannot leave them
# hovering just above zero.
SAFETY_OFFSET = 1e-4


@dataclass(frozen=True)
class PlacementProblem:
    scene: Scene
    skeleton: Skeleton
    goal: GoalPredicate
    margin: float = DEFAULT_MARGIN
    n_samples: int = 256
    gn_iters: int = 20
    n_restarts: int = 4

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass
class ConstraintResiduals:
    ineq: np.ndarray
    labels: list[str]

    @property
    def max(self) -> float:
        return float(np.max(self.ineq)) if len(self.ineq) else -np.inf


@dataclass
class FeasibilityResult:
    feasible: bool
    placements: dict[int, Pose2]
    cost: float
    manipulated: frozenset[int]
    violation: float

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "placements": {str(k): [v.x, v.y] for k, v in sorted(self.placements.items())},
            "cost": self.cost,
            "manipulated": sorted(self.manipulated),
            "violation": self.violation if np.isfinite(self.violation) else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeasibilityResult":
        return cls(
            bool(d["feasible"]),
            {int(k): Pose2(*v) for k, v in d["placements"].items()},
            float(d["cost"]),
            frozenset(int(v) for v in d["manipulated"]),
            float("inf") if d["violation"] is None else float(d["violation"]),
        )


@dataclass
class _Layout:
    """Array view of a configuration with precomputed residual index sets."""

    ids: list[int]
    half: np.ndarray
    support: dict[int, int]
    table_pairs: tuple[np.ndarray, np.ndarray] = field(init=False)
    stack_pairs: tuple[np.ndarray, np.ndarray] = field(init=False)
    table_idx: np.ndarray = field(init=False)
    stacked_idx: np.ndarray = field(init=False)
    support_idx: np.ndarray = field(init=False)

    def __post_init__(self):
        index = {o: i for i, o in enumerate(self.ids)}
        table = [i for i, o in enumerate(self.ids) if o not in self.support]
        stacked = [i for i, o in enumerate(self.ids) if o in self.support]
        self.table_idx = np.array(table, dtype=int)
        self.stacked_idx = np.array(stacked, dtype=int)
        self.support_idx = np.array([index[self.support[self.ids[i]]] for i in stacked], dtype=int)
        ti, tj = [], []
        for a in range(len(table)):
            for b in range(a + 1, len(table)):
                ti.append(table[a])
                tj.append(table[b])
        si, sj = [], []
        for a in range(len(stacked)):
            for b in range(a + 1, len(stacked)):
                if self.support[self.ids[stacked[a]]] == self.support[self.ids[stacked[b]]]:
                    si.append(stacked[a])
                    sj.append(stacked[b])
        self.table_pairs = (np.array(ti, dtype=int), np.array(tj, dtype=int))
        self.stack_pairs = (np.array(si, dtype=int), np.array(sj, dtype=int))

    def residuals(self, centers: np.ndarray) -> np.ndarray:
        h = self.half
        parts = []
        for i, j in (self.table_pairs, self.stack_pairs):
            if len(i):
                pen = (h[i] + h[j]) - np.abs(centers[i] - centers[j])
                parts.append(pen.min(axis=1))
        t = self.table_idx
        if len(t):
            parts.append((h[t] - centers[t]).ravel())
            parts.append((centers[t] + h[t] - 1.0).ravel())
        s, b = self.stacked_idx, self.support_idx
        if len(s):
            parts.append(((centers[b] - h[b]) - (centers[s] - h[s])).ravel())
            parts.append(((centers[s] + h[s]) - (centers[b] + h[b])).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def labels(self) -> list[str]:
        out = []
        for i, j in (self.table_pairs, self.stack_pairs):
            out += [f"collide({self.ids[a]},{self.ids[b]})" for a, b in zip(i, j)]
        for side in ("lo", "hi"):
            for a in self.table_idx:
                out += [f"workspace_{side}_{ax}({self.ids[a]})" for ax in "xy"]
        for side in ("lo", "hi"):
            for a in self.stacked_idx:
                out += [f"support_{side}_{ax}({self.ids[a]})" for ax in "xy"]
        return out


def _arrays(poses: Mapping[int, Pose2], scene: Scene) -> tuple[list[int], np.ndarray, np.ndarray]:
    ids = scene.ids
    specs = scene.specs()
    for o in poses:
        if o not in specs:
            raise UnknownObject(o)
    base = scene.poses()
    centers = np.array([[poses.get(o, base[o]).x, poses.get(o, base[o]).y] for o in ids], dtype=float)
    half = np.array([specs[o].half_extents for o in ids], dtype=float)
    return ids, centers, half


def collision_residuals(
    poses: Mapping[int, Pose2], scene: Scene, support: Mapping[int, int] | None = None
) -> ConstraintResiduals:
    """Pairwise non-penetration (per level) plus containment residuals; feasible iff all <= 0.

    Pair residual is the smaller per-axis penetration depth, so it is <= 0
    exactly when the two footprints do not overlap with positive area.
    """
    ids, centers, half = _arrays(poses, scene)
    layout = _Layout(ids, half, dict(scene.on_top_of if support is None else support))
    return ConstraintResiduals(layout.residuals(centers), layout.labels())


def _predicate_vector(kind: PredicateKind, a: np.ndarray, ha: np.ndarray, b: np.ndarray, hb: np.ndarray, margin: float):
    if kind is PredicateKind.OnLeft:
        return np.array([(a[0] + ha[0]) - (b[0] - hb[0]) + margin])
    if kind is PredicateKind.OnRight:
        return np.array([(b[0] + hb[0]) + margin - (a[0] - ha[0])])
    if kind is PredicateKind.InFront:
        return np.array([(b[1] + hb[1]) + margin - (a[1] - ha[1])])
    if kind is PredicateKind.Behind:
        return np.array([(a[1] + ha[1]) - (b[1] - hb[1]) + margin])
    return np.concatenate([(b - hb) - (a - ha), (a + ha) - (b + hb)])


_PREDICATE_LABELS = {
    PredicateKind.OnTop: ["inside_lo_x", "inside_lo_y", "inside_hi_x", "inside_hi_y"],
}


def predicate_residuals(
    poses: Mapping[int, Pose2], scene: Scene, g: GoalPredicate, margin: float = DEFAULT_MARGIN
) -> ConstraintResiduals:
    ids, centers, half = _arrays(poses, scene)
    index = {o: i for i, o in enumerate(ids)}
    if g.subject not in index:
        raise UnknownObject(g.subject)
    if g.reference not in index:
        raise UnknownObject(g.reference)
    a, b = index[g.subject], index[g.reference]
    r = _predicate_vector(g.kind, centers[a], half[a], centers[b], half[b], margin)
    names = _PREDICATE_LABELS.get(g.kind, [g.kind.value])
    return ConstraintResiduals(r, [f"{n}({g.subject},{g.reference})" for n in names])


def final_support(scene: Scene, skeleton: Skeleton, goal: GoalPredicate) -> dict[int, int]:
    """Support relation after executing the skeleton."""
    support = dict(scene.on_top_of)
    for o in skeleton.picks:
        support.pop(o, None)
    if goal.kind is PredicateKind.OnTop and skeleton.actions and skeleton.actions[-1].object == goal.subject:
        support[goal.subject] = goal.reference
    return support


class _Objective:
    def __init__(self, problem: PlacementProblem, moved: list[int]):
        scene = problem.scene
        self.ids, self.centers0, half = _arrays({}, scene)
        self.layout = _Layout(self.ids, half, final_support(scene, problem.skeleton, problem.goal))
        index = {o: i for i, o in enumerate(self.ids)}
        self.var_idx = np.array([index[o] for o in moved], dtype=int)
        self.goal = problem.goal
        self.a, self.b = index[problem.goal.subject], index[problem.goal.reference]
        self.half = half
        self.margin = problem.margin

    def centers(self, p: np.ndarray) -> np.ndarray:
        c = self.centers0.copy()
        c[self.var_idx] = p.reshape(-1, 2)
        return c

    def residuals(self, p: np.ndarray) -> np.ndarray:
        c = self.centers(p)
        goal = _predicate_vector(self.goal.kind, c[self.a], self.half[self.a], c[self.b], self.half[self.b], self.margin)
        r = np.concatenate([self.layout.residuals(c), goal])
        if not np.all(np.isfinite(r)):
            raise NonFiniteResidual("residual evaluation produced non-finite values")
        return r

    def value(self, p: np.ndarray, r: np.ndarray | None = None) -> float:
        r = self.residuals(p) if r is None else r
        hinge = np.maximum(0.0, r + SAFETY_OFFSET)
        disp = p - self.centers0[self.var_idx].ravel()
        return float(hinge @ hinge + COST_WEIGHT * (disp @ disp))

    def jacobian(self, p: np.ndarray, r: np.ndarray) -> np.ndarray:
        J = np.empty((len(r), len(p)))
        for k in range(len(p)):
            q = p.copy()
            q[k] += FD_STEP
            J[:, k] = (self.residuals(q) - r) / FD_STEP
        return J


def refine_gauss_newton(
    problem: PlacementProblem, init_poses: Mapping[int, Pose2], history: list[float] | None = None
) -> tuple[dict[int, Pose2], float]:
    """Gauss-Newton on squared hinge of the active residuals plus a small displacement cost.

    Stops as soon as the largest residual is <= VIOLATION_TOL. ``history``
    receives the objective value at every accepted iterate.
    """
    moved = sorted(init_poses)
    obj = _Objective(problem, moved)
    p = np.array([[init_poses[o].x, init_poses[o].y] for o in moved], dtype=float).ravel()
    r = obj.residuals(p)
    f = obj.value(p, r)
    if history is not None:
        history.append(f)
    for _ in range(problem.gn_iters):
        if r.max(initial=-np.inf) <= VIOLATION_TOL or not len(p):
            break
        active = r + SAFETY_OFFSET > 0
        J = obj.jacobian(p, r)[active]
        ra = r[active] + SAFETY_OFFSET
        disp = p - obj.centers0[obj.var_idx].ravel()
        H = J.T @ J + (COST_WEIGHT + 1e-12) * np.eye(len(p))
        step = -np.linalg.solve(H, J.T @ ra + COST_WEIGHT * disp)
        t = 1.0
        while t > 1e-6:
            q = p + t * step
            rq = obj.residuals(q)
            fq = obj.value(q, rq)
            if fq <= f:
                break
            t *= 0.5
        else:
            break
        p, r, f = q, rq, fq
        if history is not None:
            history.append(f)
    c = obj.centers(p)
    poses = {o: Pose2(float(c[i, 0]), float(c[i, 1])) for o, i in zip(moved, obj.var_idx)}
    return poses, max(0.0, float(r.max(initial=0.0)))


def skeleton_seed(scene_seed: int, skeleton: Skeleton) -> np.random.SeedSequence:
    digest = hashlib.sha256(format_skeleton(skeleton).encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    s = int(scene_seed) & (2**64 - 1)
    return np.random.SeedSequence([s & 0xFFFFFFFF, s >> 32, *words])


def _goal_region(kind: PredicateKind, ha, b, hb, margin) -> tuple[float, float, float, float]:
    """Box of subject centers satisfying the predicate: (x_lo, x_hi, y_lo, y_hi)."""
    x_lo, x_hi, y_lo, y_hi = ha[0], 1 - ha[0], ha[1], 1 - ha[1]
    if kind is PredicateKind.OnLeft:
        x_hi = min(x_hi, b[0] - hb[0] - margin - ha[0])
    elif kind is PredicateKind.OnRight:
        x_lo = max(x_lo, b[0] + hb[0] + margin + ha[0])
    elif kind is PredicateKind.InFront:
        y_lo = max(y_lo, b[1] + hb[1] + margin + ha[1])
    elif kind is PredicateKind.Behind:
        y_hi = min(y_hi, b[1] - hb[1] - margin - ha[1])
    else:
        x_lo, x_hi = b[0] - hb[0] + ha[0], b[0] + hb[0] - ha[0]
        y_lo, y_hi = b[1] - hb[1] + ha[1], b[1] + hb[1] - ha[1]
    return x_lo, x_hi, y_lo, y_hi


def _first_free(cands: np.ndarray, h: np.ndarray, others_c: np.ndarray, others_h: np.ndarray) -> np.ndarray | None:
    if len(others_c):
        pen = (h + others_h)[None, :, :] - np.abs(cands[:, None, :] - others_c[None, :, :])
        ok = np.all(pen.min(axis=2) <= 0, axis=1)
    else:
        ok = np.ones(len(cands), dtype=bool)
    hits = np.nonzero(ok)[0]
    return cands[hits[0]] if len(hits) else None


def _attempt(problem: PlacementProblem, rng: np.random.Generator):
    """One sequential sampling pass. Returns (centers, failed_deterministically)."""
    scene, g = problem.scene, problem.goal
    ids, centers, half = _arrays({}, scene)
    index = {o: i for i, o in enumerate(ids)}
    support = dict(scene.on_top_of)
    ref_moved = False
    last = len(problem.skeleton.actions) - 1
    held = None
    for step, a in enumerate(problem.skeleton.actions):
        o = index[theta(a)]
        if a.kind is ActionKind.Pick:
            held = theta(a)
            support.pop(held, None)
            continue
        final = step == last and theta(a) == g.subject
        if final:
            b = index[g.reference]
            x_lo, x_hi, y_lo, y_hi = _goal_region(g.kind, half[o], centers[b], half[b], problem.margin)
            if x_lo > x_hi or y_lo > y_hi:
                # An OnTop region's size does not depend on where the reference sits.
                return None, not ref_moved or g.kind is PredicateKind.OnTop
            if g.kind is PredicateKind.OnTop:
                peers = [index[t] for t, s in support.items() if s == g.reference and t != held]
            else:
                peers = [index[t] for t in ids if t not in support and t != held]
        else:
            x_lo, x_hi, y_lo, y_hi = half[o][0], 1 - half[o][0], half[o][1], 1 - half[o][1]
            peers = [index[t] for t in ids if t not in support and t != held]
            if theta(a) == g.reference:
                ref_moved = True
        u = rng.random((problem.n_samples, 2))
        cands = np.column_stack([x_lo + u[:, 0] * (x_hi - x_lo), y_lo + u[:, 1] * (y_hi - y_lo)])
        peers = np.array(peers, dtype=int)
        pick = _first_free(cands, half[o], centers[peers], half[peers])
        if pick is None:
            return None, False
        centers[o] = pick
        if final and g.kind is PredicateKind.OnTop:
            support[held] = g.reference
        held = None
    return centers, False


def check_feasible(problem: PlacementProblem) -> FeasibilityResult:
    """Feasibility of one skeleton; infeasibility is reported, never raised."""
    scene, sk = problem.scene, problem.skeleton
    manipulated = frozenset(theta(a) for a in sk.actions)
    moved = sorted(manipulated)
    rng = np.random.default_rng(skeleton_seed(scene.rng_seed, sk))
    base = scene.poses()
    best_violation = np.inf
    placements: dict[int, Pose2] = {}
    ends_with_subject = bool(sk.actions) and sk.actions[-1].object == problem.goal.subject
    if ends_with_subject:
        for _ in range(problem.n_restarts):
            centers, hopeless = _attempt(problem, rng)
            if hopeless:
                break
            if centers is None:
                continue
            ids = scene.ids
            init = {o: Pose2(float(centers[ids.index(o), 0]), float(centers[ids.index(o), 1])) for o in moved}
            poses, violation = refine_gauss_newton(problem, init)
            if violation < best_violation:
                best_violation, placements = violation, poses
            if violation <= VIOLATION_TOL:
                cost = sum((poses[o].x - base[o].x) ** 2 + (poses[o].y - base[o].y) ** 2 for o in moved)
                return FeasibilityResult(True, poses, float(cost), manipulated, violation)
    return FeasibilityResult(False, placements, 0.0, manipulated, float(best_violation))


def path_cost(result: FeasibilityResult) -> float:
    if not result.feasible:
        raise InfeasibleResult("path cost is only defined for feasible results")
    return result.cost
