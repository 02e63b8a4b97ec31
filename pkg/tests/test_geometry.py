import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relplan.errors import InfeasibleResult, UnknownObject
from relplan.geometry import (
    FD_STEP,
    VIOLATION_TOL,
    FeasibilityResult,
    PlacementProblem,
    check_feasible,
    collision_residuals,
    path_cost,
    predicate_residuals,
    refine_gauss_newton,
)
from relplan.scene import (
    GoalPredicate,
    Pose2,
    PredicateKind,
    contains,
    eval_predicate,
    footprints_overlap,
    sample_scene,
    validate_scene,
)
from relplan.symbolic import enumerate_skeletons, parse_skeleton
from tests.oracles import make_scene, region_is_blocked

# subject 0 must go left of reference 2; object 1 is a bar spanning the whole
# strip left of the reference, and the subject is tall enough to always hit it
BLOCKED = make_scene(
    [(0.8, 0.5, 0.05, 0.25), (0.12, 0.5, 0.12, 0.05), (0.3, 0.5, 0.05, 0.05)],
    seed=11,
)
BLOCKED_GOAL = GoalPredicate(PredicateKind.OnLeft, 0, 2)


def test_blocking_scene_is_valid_and_blocked():
    validate_scene(BLOCKED)
    assert region_is_blocked(BLOCKED, 0, 2, PredicateKind.OnLeft, 0.01)


def test_blocking_scene_needs_the_blocker():
    direct = check_feasible(PlacementProblem(BLOCKED, parse_skeleton("P0;L0"), BLOCKED_GOAL))
    assert not direct.feasible
    res = check_feasible(PlacementProblem(BLOCKED, parse_skeleton("P1;L1;P0;L0"), BLOCKED_GOAL))
    assert res.feasible and res.manipulated == {0, 1}
    assert res.violation <= VIOLATION_TOL
    # with the blocker at its new pose the strip is clear on a 100 x 100 grid
    cleared = BLOCKED.with_poses(res.placements)
    validate_scene(cleared)
    assert eval_predicate(cleared, BLOCKED_GOAL)
    assert not region_is_blocked(BLOCKED.with_poses({1: res.placements[1]}), 0, 2, PredicateKind.OnLeft, 0.01)


def test_feasibility_is_deterministic():
    p = PlacementProblem(BLOCKED, parse_skeleton("P1;L1;P0;L0"), BLOCKED_GOAL)
    first = check_feasible(p).to_json()
    for _ in range(5):
        assert check_feasible(p).to_json() == first


def test_goal_already_satisfied():
    scene = make_scene([(0.2, 0.5, 0.05, 0.05), (0.6, 0.5, 0.05, 0.05)], seed=3)
    g = GoalPredicate(PredicateKind.OnLeft, 0, 1)
    res = check_feasible(PlacementProblem(scene, parse_skeleton("P0;L0"), g))
    assert res.feasible and res.manipulated == {0}


def test_predicate_residual_examples():
    scene = make_scene([(0.2, 0.5, 0.05, 0.05), (0.6, 0.5, 0.05, 0.05)])
    g = GoalPredicate(PredicateKind.OnLeft, 0, 1)
    # right edge of A at 0.50, left edge of B at 0.55, margin 0.01: slack 0.04
    r = predicate_residuals({0: Pose2(0.45, 0.5)}, scene, g, 0.01)
    assert r.ineq[0] == pytest.approx(-0.04, abs=1e-12)
    r = predicate_residuals({0: Pose2(0.59, 0.5)}, scene, g, 0.01)
    assert r.ineq[0] == pytest.approx(0.10, abs=1e-12)
    assert r.labels == ["OnLeft(0,1)"]
    with pytest.raises(UnknownObject):
        predicate_residuals({7: Pose2(0.5, 0.5)}, scene, g)


def test_on_top_residuals_are_containment():
    scene = make_scene([(0.5, 0.5, 0.1, 0.1), (0.2, 0.2, 0.05, 0.05)])
    g = GoalPredicate(PredicateKind.OnTop, 1, 0)
    inside = predicate_residuals({1: Pose2(0.52, 0.48)}, scene, g)
    assert len(inside.ineq) == 4 and inside.max <= 0
    outside = predicate_residuals({1: Pose2(0.58, 0.48)}, scene, g)
    assert outside.max == pytest.approx(0.03)


def test_collision_residual_examples():
    scene = make_scene([(0.3, 0.5, 0.05, 0.05), (0.5, 0.5, 0.05, 0.05)])
    r = collision_residuals({}, scene)
    assert r.labels[0] == "collide(0,1)"
    assert r.ineq[0] == pytest.approx(-0.1)
    r = collision_residuals({1: Pose2(0.3, 0.5)}, scene)
    assert r.ineq[0] == pytest.approx(0.1)
    assert len(r.ineq) == len(r.labels) == 1 + 8


def _random_pair(rng):
    rects = [(rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), rng.uniform(0.02, 0.25), rng.uniform(0.02, 0.25))
             for _ in range(2)]
    return make_scene(rects)


@given(seed=st.integers(0, 2**32))
def test_collision_sign_matches_overlap_oracle(seed):
    scene = _random_pair(np.random.default_rng(seed))
    r = collision_residuals({}, scene).ineq[0]
    assert (r <= 0) == (not footprints_overlap(scene.objects[0], scene.objects[1]))


@given(seed=st.integers(0, 2**32), kind=st.sampled_from(list(PredicateKind)))
def test_predicate_sign_matches_oracle(seed, kind):
    scene = _random_pair(np.random.default_rng(seed))
    g = GoalPredicate(kind, 0, 1)
    r = predicate_residuals({}, scene, g).max
    if kind is PredicateKind.OnTop:
        assert (r <= 0) == contains(scene.objects[1], scene.objects[0])
    else:
        assert (r <= 0) == eval_predicate(scene, g)


@given(seed=st.integers(0, 2**32), kind=st.sampled_from(list(PredicateKind)))
def test_residuals_are_affine_so_differences_match(seed, kind):
    rng = np.random.default_rng(seed)
    scene = _random_pair(rng)
    g = GoalPredicate(kind, 0, 1)
    p = scene.pose(0)
    d = rng.normal(size=2)
    d /= np.linalg.norm(d)
    h = FD_STEP

    def r(t):
        return predicate_residuals({0: Pose2(p.x + t * d[0], p.y + t * d[1])}, scene, g).ineq

    # exact directional derivative of an affine residual, from the formula
    ax = {PredicateKind.OnLeft: (d[0],), PredicateKind.OnRight: (-d[0],), PredicateKind.InFront: (-d[1],),
          PredicateKind.Behind: (d[1],), PredicateKind.OnTop: (-d[0], -d[1], d[0], d[1])}[kind]
    fd = (r(h) - r(0.0)) / h
    np.testing.assert_allclose(fd, ax, rtol=1e-4, atol=1e-6)


def test_refine_fixed_point():
    scene = make_scene([(0.2, 0.5, 0.05, 0.05), (0.6, 0.5, 0.05, 0.05)])
    g = GoalPredicate(PredicateKind.OnLeft, 0, 1)
    p = PlacementProblem(scene, parse_skeleton("P0;L0"), g)
    poses, v = refine_gauss_newton(p, {0: Pose2(0.2, 0.5)})
    assert v == 0.0 and poses == {0: Pose2(0.2, 0.5)}


def test_refine_converges_on_small_violation():
    scene = make_scene([(0.5, 0.5, 0.05, 0.05), (0.6, 0.2, 0.05, 0.05)])
    g = GoalPredicate(PredicateKind.OnLeft, 0, 1)
    p = PlacementProblem(scene, parse_skeleton("P0;L0"), g)
    # right edge 0.55 against required 0.54 (0.02 after nudging): violated by 0.02
    start = {0: Pose2(0.51, 0.5)}
    assert predicate_residuals(start, scene, g).max == pytest.approx(0.02)
    history: list[float] = []
    poses, v = refine_gauss_newton(p, start, history)
    assert v <= VIOLATION_TOL
    assert len(history) - 1 <= p.gn_iters
    # the residual is affine, so one linearised step lands on it
    assert len(history) - 1 <= 2
    assert poses[0].x <= 0.49 + VIOLATION_TOL


@settings(max_examples=100)
@given(seed=st.integers(0, 2**32))
def test_refine_objective_non_increasing(seed):
    rng = np.random.default_rng(seed)
    scene = sample_scene(5, seed)
    g = GoalPredicate(PredicateKind(rng.choice(["OnLeft", "OnRight", "InFront", "Behind"])), 0, 1)
    p = PlacementProblem(scene, parse_skeleton("P2;L2;P0;L0"), g)
    init = {o: Pose2(*rng.uniform(0.1, 0.9, 2)) for o in (0, 2)}
    history: list[float] = []
    refine_gauss_newton(p, init, history)
    assert all(b <= a for a, b in zip(history, history[1:]))


@given(n=st.integers(3, 6), seed=st.integers(0, 2**32), stack=st.booleans(),
       kind=st.sampled_from(list(PredicateKind)))
def test_soundness_by_independent_residual_pass(n, seed, stack, kind):
    scene = sample_scene(n, seed, stack_one=stack or kind is PredicateKind.OnTop)
    table = [s.id for s, _ in scene.objects if s.height_class == 0]
    g = GoalPredicate(kind, table[0], table[1])
    for sk in list(enumerate_skeletons(scene, g, set(scene.ids), 4))[:6]:
        res = check_feasible(PlacementProblem(scene, sk, g))
        if not res.feasible:
            continue
        assert res.manipulated == set(sk.picks)
        support = {t: s for t, s in scene.on_top_of.items() if t not in sk.picks}
        if kind is PredicateKind.OnTop:
            support[g.subject] = g.reference
        after = scene.with_poses(res.placements, support)
        # re-check with the boolean oracles rather than the residual code
        validate_scene(after)
        if kind is not PredicateKind.OnTop:
            assert eval_predicate(after, g, 0.01 - 2 * VIOLATION_TOL)
        base = scene.poses()
        cost = sum((p.x - base[o].x) ** 2 + (p.y - base[o].y) ** 2 for o, p in res.placements.items())
        assert math.isclose(path_cost(res), cost, rel_tol=1e-12, abs_tol=1e-15)


def test_superset_keeps_skeleton_feasible():
    # the solver only sees the skeleton, never the allowed set
    sk = parse_skeleton("P1;L1;P0;L0")
    a = check_feasible(PlacementProblem(BLOCKED, sk, BLOCKED_GOAL))
    b = check_feasible(PlacementProblem(BLOCKED, sk, BLOCKED_GOAL))
    assert a.to_json() == b.to_json()


def test_path_cost():
    res = FeasibilityResult(True, {0: Pose2(0.3, 0.4)}, 0.25, frozenset({0}), 0.0)
    assert path_cost(res) == 0.25
    assert path_cost(FeasibilityResult(True, {}, 0.0, frozenset(), 0.0)) == 0.0
    with pytest.raises(InfeasibleResult):
        path_cost(FeasibilityResult(False, {}, 0.0, frozenset(), 1.0))


def test_cost_is_squared_displacement():
    scene = make_scene([(0.2, 0.2, 0.05, 0.05), (0.8, 0.8, 0.05, 0.05)], seed=5)
    g = GoalPredicate(PredicateKind.InFront, 0, 1)
    res = check_feasible(PlacementProblem(scene, parse_skeleton("P0;L0"), g))
    assert res.feasible
    p = res.placements[0]
    assert res.cost == pytest.approx((p.x - 0.2) ** 2 + (p.y - 0.2) ** 2, rel=1e-12)


def test_result_json_round_trip():
    res = check_feasible(PlacementProblem(BLOCKED, parse_skeleton("P1;L1;P0;L0"), BLOCKED_GOAL))
    assert FeasibilityResult.from_dict(res.to_dict()) == res
    bad = check_feasible(PlacementProblem(BLOCKED, parse_skeleton("P0;L0"), BLOCKED_GOAL))
    assert FeasibilityResult.from_dict(bad.to_dict()).feasible is False
