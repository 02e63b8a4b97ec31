import gzip
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relplan.errors import MalformedRecord
from relplan.geometry import PlacementProblem, check_feasible
from relplan.labeler import (
    HEADER,
    DatasetStats,
    choose_goal_pair,
    compute_stats,
    decode_array,
    encode_array,
    generate_dataset,
    label_scene,
    load_dataset,
    load_scenes,
    sidecar_paths,
)
from relplan.scene import N_VIEWS, GoalPredicate, PredicateKind, render_canonical_view, sample_scene
from relplan.symbolic import enumerate_skeletons, parse_skeleton
from tests.oracles import brute_force_skeletons, make_scene
from tests.test_geometry import BLOCKED, BLOCKED_GOAL

SAME_PLANE = [PredicateKind.OnLeft, PredicateKind.OnRight, PredicateKind.InFront, PredicateKind.Behind]


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d.tsv.gz"
    stats = generate_dataset(12, SAME_PLANE, (3, 5), seed=5, out_path=out)
    return out, stats


def test_label_subject_only():
    scene = make_scene([(0.2, 0.5, 0.05, 0.05), (0.6, 0.5, 0.05, 0.05), (0.8, 0.1, 0.05, 0.05)])
    assert label_scene(scene, GoalPredicate(PredicateKind.OnLeft, 0, 1), 4) == {0}


def test_label_blocking_scene():
    assert label_scene(BLOCKED, BLOCKED_GOAL, 4) == {0, 1}
    # cross-check: the exhaustive first feasible skeleton moves the blocker
    for text in brute_force_skeletons(BLOCKED, 0, set(BLOCKED.ids), 4):
        if check_feasible(PlacementProblem(BLOCKED, parse_skeleton(text), BLOCKED_GOAL)).feasible:
            assert text == "P1;L1;P0;L0"
            break


def test_label_absent_when_blocker_out_of_reach():
    assert label_scene(BLOCKED, BLOCKED_GOAL, 2) is None
    # every skeleton of length <= 2 checked directly
    for sk in enumerate_skeletons(BLOCKED, BLOCKED_GOAL, set(BLOCKED.ids), 2):
        assert not check_feasible(PlacementProblem(BLOCKED, sk, BLOCKED_GOAL)).feasible


def test_stats_arithmetic():
    s = DatasetStats()
    s.add("OnLeft", 1, 3)
    s.add("OnLeft", 0, 7)
    d = s.to_dict()["predicates"]["OnLeft"]
    assert d["relevant_pct"] == pytest.approx(30.0) and d["irrelevant_pct"] == pytest.approx(70.0)
    assert s.total == 10 and s.relevant_fraction() == pytest.approx(0.3)
    assert DatasetStats.from_dict(s.to_dict()) == s
    assert "30.0%" in s.table()


def test_empty_dataset_stats(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text(HEADER + "\n")
    assert compute_stats(p).total == 0
    assert len(load_dataset(p)) == 0


def test_malformed_records(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text(HEADER + "\n0\tOnLeft\t1\t0\n")
    with pytest.raises(MalformedRecord) as err:
        compute_stats(p)
    assert err.value.line_no == 2
    p.write_text(HEADER + "\n" + "\t".join(["0", "OnLeft", "1", "3"] + ["x"] * 4) + "\n")
    with pytest.raises(MalformedRecord):
        compute_stats(p)
    p.write_text("not a dataset\n")
    with pytest.raises(MalformedRecord) as err:
        compute_stats(p)
    assert err.value.line_no == 1


def test_array_codec_round_trip():
    a = np.random.default_rng(0).random((4, 3)).astype(np.float32)
    np.testing.assert_array_equal(decode_array(encode_array(a), (4, 3)), a)


def test_generate_argument_checks(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(0, SAME_PLANE, out_path=tmp_path / "x.tsv")
    with pytest.raises(ValueError):
        generate_dataset(1, SAME_PLANE, (2, 5), out_path=tmp_path / "x.tsv")


def test_returned_stats_match_file(small_dataset):
    out, stats = small_dataset
    assert compute_stats(out) == stats
    stats_path, _ = sidecar_paths(out)
    assert DatasetStats.from_dict(json.loads(stats_path.read_text())) == stats
    assert stats.total == len(load_dataset(out))


def test_generation_is_deterministic(small_dataset, tmp_path):
    out, _ = small_dataset
    again = tmp_path / "again.tsv.gz"
    generate_dataset(12, SAME_PLANE, (3, 5), seed=5, out_path=again, threads=2)
    assert again.read_bytes() == out.read_bytes()
    assert sidecar_paths(again)[1].read_bytes() == sidecar_paths(out)[1].read_bytes()


def test_file_layout(small_dataset):
    out, _ = small_dataset
    with gzip.open(out, "rt") as f:
        assert f.readline().rstrip("\n") == HEADER
        fields = f.readline().rstrip("\n").split("\t")
    assert len(fields) == 8
    img = decode_array(fields[4], (96, 96, 3))
    assert img.dtype == np.float32 and 0 <= img.min() and img.max() <= 1


def test_every_object_queried_and_subject_relevant(small_dataset):
    out, stats = small_dataset
    _, scenes_path = sidecar_paths(out)
    data = load_dataset(out)
    for ls in load_scenes(scenes_path):
        for g, manipulated in ls.labels:
            assert g.subject in manipulated
            rows = (data.scene_ids == ls.scene_id) & (data.kinds == SAME_PLANE.index(g.kind))
            assert sorted(data.query_ids[rows]) == ls.scene.ids
            for qid, label in zip(data.query_ids[rows], data.labels[rows]):
                assert label == int(qid in manipulated)


def test_label_soundness_spot_check(small_dataset):
    out, _ = small_dataset
    _, scenes_path = sidecar_paths(out)
    data = load_dataset(out)
    scenes = {ls.scene_id: ls for ls in load_scenes(scenes_path)}
    rng = np.random.default_rng(0)
    relevant = np.nonzero(data.labels == 1)[0]
    for i in rng.choice(relevant, min(100, len(relevant)), replace=False):
        s = data.sample(int(i))
        ls = scenes[s.scene_id]
        g = next(g for g, _ in ls.labels if g.kind is s.predicate)
        assert s.query_id in label_scene(ls.scene, g)


def test_sample_views_match_scene(small_dataset):
    out, _ = small_dataset
    data = load_dataset(out)
    ls = load_scenes(sidecar_paths(out)[1])[0]
    s = data.sample(0)
    spec = ls.scene.spec(s.query_id)
    assert any(np.array_equal(s.query_view, render_canonical_view(spec, k).astype(np.float32)) for k in range(N_VIEWS))


@settings(max_examples=30)
@given(seed=st.integers(0, 2**32), stack=st.booleans())
def test_goal_pair_is_table_level(seed, stack):
    scene = sample_scene(6, seed, stack_one=stack)
    kinds = [PredicateKind.OnTop] if stack else SAME_PLANE
    subject, reference = choose_goal_pair(scene, kinds, np.random.default_rng(seed))
    assert subject != reference
    assert subject not in scene.on_top_of
    if stack:
        assert reference in scene.on_top_of.values()
