"""Relevance labels from baseline planning, and the on-disk dataset format.

Dataset files are line oriented (gzip-compressed when the path ends in
``.gz``)::

    relplan-dataset<TAB>v1<TAB>image=96x96x3<TAB>view=32x32x3
    scene_id<TAB>kind<TAB>query_id<TAB>label<TAB>image<TAB>subject<TAB>reference<TAB>query

Arrays are base-64 encoded little-endian float32. Two sidecars are written
next to the dataset: ``<path>.stats.json`` and ``<path>.scenes.jsonl`` (one
labeled scene per line).
"""
from __future__ import annotations

import base64
import gzip
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from relplan.errors import IoFailure, MalformedRecord, PlacementExhausted
from relplan.planner import search
from relplan.scene import (
    IMAGE_SIZE,
    N_VIEWS,
    VIEW_SIZE,
    GoalPredicate,
    PredicateKind,
    Scene,
    goal_from_dict,
    goal_to_dict,
    rasterize_scene,
    render_canonical_view,
    sample_scene,
    scene_from_dict,
    scene_to_dict,
    table_level_ids,
)
from relplan.symbolic import DEFAULT_K_MAX

FORMAT_VERSION = "v1"
HEADER = f"relplan-dataset\t{FORMAT_VERSION}\timage={IMAGE_SIZE}x{IMAGE_SIZE}x3\tview={VIEW_SIZE}x{VIEW_SIZE}x3"
IMAGE_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, 3)
VIEW_SHAPE = (VIEW_SIZE, VIEW_SIZE, 3)


@dataclass
class Sample:
    image: np.ndarray
    goal_views: tuple[np.ndarray, np.ndarray]
    query_view: np.ndarray
    predicate: PredicateKind
    label: int
    scene_id: int
    query_id: int


@dataclass
class DatasetStats:
    counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, kind: str, label: int, n: int = 1) -> None:
        c = self.counts.setdefault(kind, {"relevant": 0, "irrelevant": 0})
        c["relevant" if label else "irrelevant"] += n

    @property
    def total(self) -> int:
        return sum(c["relevant"] + c["irrelevant"] for c in self.counts.values())

    @property
    def relevant(self) -> int:
        return sum(c["relevant"] for c in self.counts.values())

    def relevant_fraction(self, kind: str | None = None) -> float:
        if kind is None:
            return self.relevant / self.total if self.total else 0.0
        c = self.counts[kind]
        n = c["relevant"] + c["irrelevant"]
        return c["relevant"] / n if n else 0.0

    def to_dict(self) -> dict:
        out = {}
        for kind in sorted(self.counts):
            c = self.counts[kind]
            n = c["relevant"] + c["irrelevant"]
            out[kind] = {
                "relevant": c["relevant"],
                "irrelevant": c["irrelevant"],
                "relevant_pct": 100.0 * c["relevant"] / n if n else 0.0,
                "irrelevant_pct": 100.0 * c["irrelevant"] / n if n else 0.0,
            }
        return {"schema": 1, "predicates": out, "total": self.total}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetStats":
        return cls({k: {"relevant": v["relevant"], "irrelevant": v["irrelevant"]} for k, v in d["predicates"].items()})

    def table(self) -> str:
        lines = [f"{'predicate':<10} {'relevant (pct.)':>22} {'irrelevant (pct.)':>22}"]
        for kind, row in self.to_dict()["predicates"].items():
            rel = f"{row['relevant']} ({row['relevant_pct']:.1f}%)"
            irr = f"{row['irrelevant']} ({row['irrelevant_pct']:.1f}%)"
            lines.append(f"{kind:<10} {rel:>22} {irr:>22}")
        return "\n".join(lines)


def label_scene(scene: Scene, g: GoalPredicate, k_max: int = DEFAULT_K_MAX) -> frozenset[int] | None:
    """Objects manipulated by the first feasible baseline plan; None if no plan exists."""
    out = search(scene, g, frozenset(scene.ids), k_max)
    return out.result.manipulated if out.solved else None


def choose_goal_pair(scene: Scene, kinds: Sequence[PredicateKind], rng: np.random.Generator) -> tuple[int, int]:
    """(subject, reference) for a generated scene.

    With stacking, the reference is the supporting object and the subject is
    drawn among table-level objects that would fit on top of it.
    """
    table = table_level_ids(scene)
    if PredicateKind.OnTop in kinds and scene.on_top_of:
        support = sorted(scene.on_top_of.values())[0]
        others = [o for o in table if o != support]
        sx, sy = scene.spec(support).half_extents
        fits = [o for o in others if scene.spec(o).half_extents[0] <= sx and scene.spec(o).half_extents[1] <= sy]
        pool = fits or others
        return int(pool[int(rng.integers(len(pool)))]), support
    a, b = rng.choice(len(table), 2, replace=False)
    return table[int(a)], table[int(b)]


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed) & (2**63 - 1), index]).generate_state(1, np.uint64)[0])


def encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_array(text: str, shape: tuple[int, ...]) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").reshape(shape)


@dataclass
class _SceneJob:
    index: int
    seed: int
    kinds: tuple[PredicateKind, ...]
    object_range: tuple[int, int]
    k_max: int


def _label_job(job: _SceneJob) -> tuple[str | None, list[str], DatasetStats]:
    """Label one scene. Returns (scenes-sidecar line, record lines, stats)."""
    stats = DatasetStats()
    rng = np.random.default_rng([int(job.seed) & (2**63 - 1), job.index, 1])
    lo, hi = job.object_range
    n_objects = int(rng.integers(lo, hi + 1))
    stack = PredicateKind.OnTop in job.kinds
    sseed = scene_seed(job.seed, job.index)
    try:
        scene = sample_scene(n_objects, sseed, stack_one=stack)
    except PlacementExhausted:
        return None, [], stats
    subject, reference = choose_goal_pair(scene, job.kinds, rng)

    image = encode_array(rasterize_scene(scene))
    specs = scene.specs()
    view_cache: dict[tuple[int, int], str] = {}

    def view(o: int, k: int) -> str:
        if (o, k) not in view_cache:
            view_cache[(o, k)] = encode_array(render_canonical_view(specs[o], k))
        return view_cache[(o, k)]

    lines: list[str] = []
    labeled = []
    for kind in job.kinds:
        g = GoalPredicate(kind, subject, reference)
        manipulated = label_scene(scene, g, job.k_max)
        if manipulated is None:
            continue
        labeled.append({"goal": goal_to_dict(g), "manipulated": sorted(manipulated)})
        for o in scene.ids:
            label = int(o in manipulated)
            vs, vr, vq = (int(v) for v in rng.integers(0, N_VIEWS, 3))
            lines.append(
                f"{job.index}\t{kind.value}\t{o}\t{label}\t{image}\t{view(subject, vs)}\t{view(reference, vr)}\t{view(o, vq)}\n"
            )
            stats.add(kind.value, label)
    side = json.dumps({"scene_id": job.index, "scene": scene_to_dict(scene), "labels": labeled}, sort_keys=True)
    return side, lines, stats


def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        # mtime=0 keeps gzip output byte-identical across runs
        raw = gzip.GzipFile(filename="", mode=mode[0] + "b", fileobj=open(path, mode[0] + "b"), mtime=0, compresslevel=1)
        return io.TextIOWrapper(raw, encoding="ascii", newline="\n")
    return open(path, mode, encoding="ascii", newline="\n")


def sidecar_paths(out_path: str | os.PathLike) -> tuple[Path, Path]:
    p = Path(out_path)
    return p.with_name(p.name + ".stats.json"), p.with_name(p.name + ".scenes.jsonl")


def generate_dataset(
    n_scenes: int,
    predicate_kinds: Sequence[PredicateKind],
    object_range: tuple[int, int] = (3, 10),
    seed: int = 0,
    out_path: str | os.PathLike = "dataset.tsv.gz",
    k_max: int = DEFAULT_K_MAX,
    threads: int = 1,
) -> DatasetStats:
    """Sample, label and write ``n_scenes`` scenes. Output depends only on the arguments."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    kinds = tuple(PredicateKind.parse(k) if isinstance(k, str) else k for k in predicate_kinds)
    if not kinds:
        raise ValueError("need at least one predicate kind")
    lo, hi = object_range
    if not 3 <= lo <= hi <= 10:
        raise ValueError("object_range must satisfy 3 <= lo <= hi <= 10")
    jobs = [_SceneJob(i, seed, kinds, (lo, hi), k_max) for i in range(n_scenes)]
    out_path = Path(out_path)
    stats_path, scenes_path = sidecar_paths(out_path)
    stats = DatasetStats({k.value: {"relevant": 0, "irrelevant": 0} for k in kinds})
    try:
        with _open_text(out_path, "w") as out, open(scenes_path, "w", encoding="ascii", newline="\n") as side_out:
            out.write(HEADER + "\n")
            for side, lines, s in _map_ordered(_label_job, jobs, threads):
                if side is not None:
                    side_out.write(side + "\n")
                out.writelines(lines)
                for kind, c in s.counts.items():
                    stats.add(kind, 1, c["relevant"])
                    stats.add(kind, 0, c["irrelevant"])
        stats_path.write_text(json.dumps(stats.to_dict(), sort_keys=True, indent=1) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return stats


def _map_ordered(fn, items: Sequence, threads: int) -> Iterator:
    if threads <= 1 or len(items) < 2:
        yield from map(fn, items)
        return
    with ProcessPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(fn, items, chunksize=max(1, len(items) // (threads * 8)))


def _records(path: Path) -> Iterator[tuple[int, list[str]]]:
    with _open_text(path, "r") as f:
        first = f.readline().rstrip("\n")
        if not first.startswith("relplan-dataset"):
            raise MalformedRecord(1, "missing dataset header")
        if first.split("\t")[1] != FORMAT_VERSION:
            raise MalformedRecord(1, f"unsupported version {first.split(chr(9))[1]}")
        for line_no, line in enumerate(f, start=2):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 8:
                raise MalformedRecord(line_no, f"expected 8 fields, got {len(fields)}")
            yield line_no, fields


def _parse_head(line_no: int, fields: list[str]) -> tuple[int, str, int, int]:
    try:
        scene_id, kind, query_id, label = int(fields[0]), fields[1], int(fields[2]), int(fields[3])
        PredicateKind(kind)
    except ValueError as exc:
        raise MalformedRecord(line_no, str(exc)) from exc
    if label not in (0, 1):
        raise MalformedRecord(line_no, f"label {label} not in {{0, 1}}")
    return scene_id, kind, query_id, label


def compute_stats(dataset_path: str | os.PathLike) -> DatasetStats:
    stats = DatasetStats()
    try:
        for line_no, fields in _records(Path(dataset_path)):
            _, kind, _, label = _parse_head(line_no, fields)
            stats.add(kind, label)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return stats


@dataclass
class SampleSet:
    """Deduplicated in-memory dataset.

    Images and views are stored once; samples refer to them by index.
    """

    images: np.ndarray
    views: np.ndarray
    image_idx: np.ndarray
    subject_idx: np.ndarray
    reference_idx: np.ndarray
    query_idx: np.ndarray
    labels: np.ndarray
    kinds: np.ndarray
    scene_ids: np.ndarray
    query_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, rows: np.ndarray) -> "SampleSet":
        return SampleSet(
            self.images,
            self.views,
            self.image_idx[rows],
            self.subject_idx[rows],
            self.reference_idx[rows],
            self.query_idx[rows],
            self.labels[rows],
            self.kinds[rows],
            self.scene_ids[rows],
            self.query_ids[rows],
        )

    def by_predicate(self) -> dict[PredicateKind, "SampleSet"]:
        out = {}
        for i, kind in enumerate(PredicateKind):
            rows = np.nonzero(self.kinds == i)[0]
            if len(rows):
                out[kind] = self.subset(rows)
        return out

    def batch(self, rows: np.ndarray, dtype=np.float64):
        """(images, subject views, reference views, query views, labels) for the given rows."""
        return (
            self.images[self.image_idx[rows]].astype(dtype),
            self.views[self.subject_idx[rows]].astype(dtype),
            self.views[self.reference_idx[rows]].astype(dtype),
            self.views[self.query_idx[rows]].astype(dtype),
            self.labels[rows].astype(dtype),
        )

    def sample(self, i: int) -> Sample:
        return Sample(
            self.images[self.image_idx[i]],
            (self.views[self.subject_idx[i]], self.views[self.reference_idx[i]]),
            self.views[self.query_idx[i]],
            list(PredicateKind)[int(self.kinds[i])],
            int(self.labels[i]),
            int(self.scene_ids[i]),
            int(self.query_ids[i]),
        )


def _digest(text: str) -> bytes:
    return hashlib.blake2b(text.encode("ascii"), digest_size=16).digest()


def load_dataset(dataset_path: str | os.PathLike) -> SampleSet:
    kind_index = {k.value: i for i, k in enumerate(PredicateKind)}
    images: list[np.ndarray] = []
    views: list[np.ndarray] = []
    image_keys: dict[bytes, int] = {}
    view_keys: dict[bytes, int] = {}
    cols: dict[str, list[int]] = {k: [] for k in ("img", "subj", "ref", "query", "label", "kind", "scene", "qid")}

    def intern(text: str, keys: dict, store: list, shape) -> int:
        key = _digest(text)
        if key not in keys:
            keys[key] = len(store)
            store.append(decode_array(text, shape))
        return keys[key]

    try:
        for line_no, fields in _records(Path(dataset_path)):
            scene_id, kind, query_id, label = _parse_head(line_no, fields)
            try:
                cols["img"].append(intern(fields[4], image_keys, images, IMAGE_SHAPE))
                cols["subj"].append(intern(fields[5], view_keys, views, VIEW_SHAPE))
                cols["ref"].append(intern(fields[6], view_keys, views, VIEW_SHAPE))
                cols["query"].append(intern(fields[7], view_keys, views, VIEW_SHAPE))
            except ValueError as exc:
                raise MalformedRecord(line_no, f"bad array payload: {exc}") from exc
            cols["label"].append(label)
            cols["kind"].append(kind_index[kind])
            cols["scene"].append(scene_id)
            cols["qid"].append(query_id)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc

    def arr(name, dtype=np.int64):
        return np.asarray(cols[name], dtype=dtype)

    return SampleSet(
        np.stack(images) if images else np.zeros((0,) + IMAGE_SHAPE, np.float32),
        np.stack(views) if views else np.zeros((0,) + VIEW_SHAPE, np.float32),
        arr("img"),
        arr("subj"),
        arr("ref"),
        arr("query"),
        arr("label", np.int8),
        arr("kind", np.int8),
        arr("scene"),
        arr("qid"),
    )


@dataclass
class LabeledScene:
    scene_id: int
    scene: Scene
    labels: list[tuple[GoalPredicate, frozenset[int]]]


def load_scenes(scenes_path: str | os.PathLike) -> list[LabeledScene]:
    out = []
    with open(scenes_path, encoding="ascii") as f:
        for line in f:
            d = json.loads(line)
            out.append(
                LabeledScene(
                    int(d["scene_id"]),
                    scene_from_dict(d["scene"]),
                    [(goal_from_dict(e["goal"]), frozenset(e["manipulated"])) for e in d["labels"]],
                )
            )
    return out


def iter_labeled(scenes: Iterable[LabeledScene], kind: PredicateKind | None = None):
    for ls in scenes:
        for g, manipulated in ls.labels:
            if kind is None or g.kind is kind:
                yield ls.scene, g, manipulated
