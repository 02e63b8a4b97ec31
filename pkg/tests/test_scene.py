import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relplan.errors import PlacementExhausted, UnknownObject
from relplan.scene import (
    IMAGE_SIZE,
    N_VIEWS,
    GoalPredicate,
    ObjectSpec,
    Pose2,
    PredicateKind,
    Scene,
    SceneConfig,
    contains,
    eval_predicate,
    footprints_overlap,
    rasterize_scene,
    render_canonical_view,
    sample_scene,
    scene_from_json,
    scene_to_json,
    validate_scene,
)
from tests.oracles import make_scene, overlap_by_grid

seeds = st.integers(min_value=0, max_value=2**63 - 1)


def test_sample_scene_small_is_valid():
    scene = sample_scene(3, 7)
    validate_scene(scene)
    assert len(scene.objects) == 3
    assert all(s.height_class == 0 for s, _ in scene.objects)


def test_sample_scene_stack_one():
    scene = sample_scene(10, 1, stack_one=True)
    validate_scene(scene)
    assert len(scene.on_top_of) == 1
    assert sum(s.height_class for s, _ in scene.objects) == 1


def test_sample_scene_is_deterministic():
    assert scene_to_json(sample_scene(3, 7)) == scene_to_json(sample_scene(3, 7))


def test_sample_scene_rejects_bad_counts():
    with pytest.raises(ValueError):
        sample_scene(2, 0)
    with pytest.raises(ValueError):
        sample_scene(11, 0)


def test_crowded_request_raises():
    with pytest.raises(PlacementExhausted):
        sample_scene(10, 0, config=SceneConfig(0.24, 0.25))


@given(n=st.integers(3, 10), seed=seeds, stack=st.booleans())
def test_sampled_scenes_satisfy_invariants(n, seed, stack):
    try:
        scene = sample_scene(n, seed, stack_one=stack)
    except PlacementExhausted:
        return
    validate_scene(scene)
    assert scene.ids == list(range(n))


@given(n=st.integers(3, 10), seed=seeds, stack=st.booleans())
def test_scene_json_round_trip(n, seed, stack):
    scene = sample_scene(n, seed, stack_one=stack)
    again = scene_from_json(scene_to_json(scene))
    assert again == scene
    assert scene_to_json(again) == scene_to_json(scene)


def test_eval_predicate_examples():
    scene = make_scene([(0.2, 0.5, 0.05, 0.05), (0.6, 0.5, 0.05, 0.05)])
    assert eval_predicate(scene, GoalPredicate(PredicateKind.OnLeft, 0, 1))
    assert not eval_predicate(scene, GoalPredicate(PredicateKind.OnRight, 0, 1))
    with pytest.raises(UnknownObject):
        eval_predicate(scene, GoalPredicate(PredicateKind.OnLeft, 0, 5))


def test_eval_on_top_uses_support_relation():
    scene = make_scene([(0.5, 0.5, 0.1, 0.1), (0.5, 0.5, 0.05, 0.05), (0.2, 0.2, 0.05, 0.05)], {1: 0})
    assert eval_predicate(scene, GoalPredicate(PredicateKind.OnTop, 1, 0))
    assert not eval_predicate(scene, GoalPredicate(PredicateKind.OnTop, 2, 0))


# 250 scenes x 4 ordered pairs = 1,000 checks
@settings(max_examples=250)
@given(seed=seeds, margin=st.floats(0.0, 0.05))
def test_predicate_mirror_laws(seed, margin):
    scene = sample_scene(4, seed)
    for a, b in [(0, 1), (1, 2), (2, 3), (3, 0)]:
        left = eval_predicate(scene, GoalPredicate(PredicateKind.OnLeft, a, b), margin)
        right = eval_predicate(scene, GoalPredicate(PredicateKind.OnRight, b, a), margin)
        front = eval_predicate(scene, GoalPredicate(PredicateKind.InFront, a, b), margin)
        behind = eval_predicate(scene, GoalPredicate(PredicateKind.Behind, b, a), margin)
        assert left == right
        assert front == behind


@given(seed=seeds, margin=st.floats(1e-6, 0.05))
def test_left_and_right_exclusive(seed, margin):
    scene = sample_scene(3, seed)
    for a, b in [(0, 1), (1, 2), (0, 2)]:
        assert not (
            eval_predicate(scene, GoalPredicate(PredicateKind.OnLeft, a, b), margin)
            and eval_predicate(scene, GoalPredicate(PredicateKind.OnRight, a, b), margin)
        )


def _pair(xa, ya, hxa, hya, xb, yb, hxb, hyb):
    return (
        (ObjectSpec(0, (hxa, hya), (1, 0, 0)), Pose2(xa, ya)),
        (ObjectSpec(1, (hxb, hyb), (0, 1, 0)), Pose2(xb, yb)),
    )


def test_footprints_overlap_examples():
    assert not footprints_overlap(*_pair(0.3, 0.3, 0.05, 0.05, 0.6, 0.6, 0.05, 0.05))
    assert footprints_overlap(*_pair(0.3, 0.3, 0.05, 0.05, 0.3, 0.3, 0.05, 0.05))
    assert not footprints_overlap(*_pair(0.25, 0.5, 0.25, 0.1, 0.75, 0.5, 0.25, 0.1))


coord = st.floats(0.0, 1.0)
half = st.floats(0.01, 0.25)


@given(coord, coord, half, half, coord, coord, half, half)
def test_footprints_overlap_matches_interval_oracle(xa, ya, hxa, hya, xb, yb, hxb, hyb):
    a, b = _pair(xa, ya, hxa, hya, xb, yb, hxb, hyb)
    expected = overlap_by_grid((xa, ya, hxa, hya), (xb, yb, hxb, hyb))
    # the two formulations round differently only when the gap is ~1 ulp
    gap = min(hxa + hxb - abs(xa - xb), hya + hyb - abs(ya - yb))
    if abs(gap) > 1e-12:
        assert footprints_overlap(a, b) == expected
        assert footprints_overlap(b, a) == expected


def test_contains():
    outer, inner = _pair(0.5, 0.5, 0.1, 0.1, 0.54, 0.5, 0.05, 0.05)
    assert contains(outer, inner)
    assert not contains(inner, outer)


def test_rasterize_empty_scene_is_black():
    grid = rasterize_scene(Scene((), {}, 0))
    assert grid.shape == (IMAGE_SIZE, IMAGE_SIZE, 3)
    assert not grid.any()


def test_rasterize_paints_center_cell():
    scene = Scene(((ObjectSpec(0, (0.1, 0.1), (1.0, 0.0, 0.0)), Pose2(0.5, 0.5)),), {}, 0)
    grid = rasterize_scene(scene)
    np.testing.assert_array_equal(grid[48, 48], [1.0, 0.0, 0.0])
    assert grid[0, 0].tolist() == [0.0, 0.0, 0.0]


def test_rasterize_axes():
    # object at the right-front corner lands in high columns and high rows
    scene = Scene(((ObjectSpec(0, (0.05, 0.05), (0.0, 1.0, 0.0)), Pose2(0.9, 0.9)),), {}, 0)
    grid = rasterize_scene(scene)
    rows, cols = np.nonzero(grid[..., 1])
    assert rows.min() > 80 and cols.min() > 80


def test_stacked_object_occludes_support():
    scene = make_scene([(0.5, 0.5, 0.15, 0.15), (0.5, 0.5, 0.05, 0.05), (0.1, 0.1, 0.05, 0.05)], {1: 0})
    validate_scene(scene)
    grid = rasterize_scene(scene)
    np.testing.assert_array_equal(grid[48, 48], scene.spec(1).color)
    np.testing.assert_array_equal(grid[48, 36], scene.spec(0).color)


@given(seed=seeds)
def test_rasterizer_locality(seed):
    scene = sample_scene(4, seed)
    spec = scene.spec(0)
    old = scene.pose(0)
    new = Pose2(1 - old.x, old.y)
    moved = scene.with_poses({0: new})
    diff = np.any(rasterize_scene(scene) != rasterize_scene(moved), axis=-1)
    centers = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
    hx, hy = spec.half_extents

    def inside(p):
        return ((np.abs(centers[:, None] - p.y) <= hy) & (np.abs(centers[None, :] - p.x) <= hx))

    assert not np.any(diff & ~(inside(old) | inside(new)))


def test_canonical_views():
    spec = ObjectSpec(3, (0.1, 0.05), (0.9, 0.1, 0.2))
    v0 = render_canonical_view(spec, 0)
    v1 = render_canonical_view(spec, 1)
    assert v0.shape == (32, 32, 3)
    np.testing.assert_array_equal(v0[0, 0], [0.5, 0.5, 0.5])
    np.testing.assert_allclose(v0[16, 16], spec.color, rtol=0, atol=1e-7)
    # nominal view is wider than tall, the rotated one taller than wide
    painted0 = np.any(v0 != 0.5, axis=-1)
    painted1 = np.any(v1 != 0.5, axis=-1)
    assert painted0.any(axis=0).sum() > painted0.any(axis=1).sum()
    assert painted1.any(axis=1).sum() > painted1.any(axis=0).sum()
    np.testing.assert_array_equal(painted0, painted1.T)
    with pytest.raises(ValueError):
        render_canonical_view(spec, N_VIEWS)


@given(seed=seeds, k=st.integers(0, N_VIEWS - 1))
def test_views_of_distinct_objects_differ(seed, k):
    scene = sample_scene(3, seed)
    views = [render_canonical_view(s, k) for s, _ in scene.objects]
    assert not np.array_equal(views[0], views[1])
    assert np.array_equal(views[2], render_canonical_view(scene.spec(2), k))


def test_goal_requires_distinct_objects():
    with pytest.raises(ValueError):
        GoalPredicate(PredicateKind.OnLeft, 1, 1)


def test_predicate_parse():
    assert PredicateKind.parse("on-top") is PredicateKind.OnTop
    assert PredicateKind.parse("InFront") is PredicateKind.InFront
    with pytest.raises(ValueError):
        PredicateKind.parse("under")
