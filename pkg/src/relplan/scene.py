"""Desk-scale scenes, goal predicates and the deterministic rasterizer.

The world is the unit square seen from above. +x points right, +y points
toward the camera ("front"). Objects are axis-aligned rectangles; at most one
level of stacking is allowed.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from relplan.errors import PlacementExhausted, UnknownObject

IMAGE_SIZE = 96
VIEW_SIZE = 32
N_VIEWS = 4
DEFAULT_MARGIN = 0.01
MAX_PLACEMENT_TRIES = 10_000
DECIMALS = 6

SCENE_BACKGROUND = (0.0, 0.0, 0.0)
VIEW_BACKGROUND = (0.5, 0.5, 0.5)
MIN_COLOR_DISTANCE = 0.2

# (rotated by 90 degrees, scale factor) per canonical view index
_VIEW_VARIANTS = ((False, 1.0), (True, 1.0), (False, 1.25), (True, 0.75))
_VIEW_PX_PER_UNIT = 48.0


class PredicateKind(str, enum.Enum):
    OnLeft = "OnLeft"
    OnRight = "OnRight"
    InFront = "InFront"
    Behind = "Behind"
    OnTop = "OnTop"

    @property
    def cli_name(self) -> str:
        return _CLI_NAMES[self]

    @classmethod
    def parse(cls, name: str) -> "PredicateKind":
        """Accept either the enum value ("OnLeft") or the CLI spelling ("on-left")."""
        for kind in cls:
            if name in (kind.value, kind.cli_name):
                return kind
        raise ValueError(f"unknown predicate {name!r}")


_CLI_NAMES = {
    PredicateKind.OnLeft: "on-left",
    PredicateKind.OnRight: "on-right",
    PredicateKind.InFront: "in-front",
    PredicateKind.Behind: "behind",
    PredicateKind.OnTop: "on-top",
}

PREDICATE_KINDS = tuple(PredicateKind)
SAME_PLANE_KINDS = (
    PredicateKind.OnLeft,
    PredicateKind.OnRight,
    PredicateKind.InFront,
    PredicateKind.Behind,
)


@dataclass(frozen=True)
class SceneConfig:
    """Size distribution of sampled objects (workspace units)."""

    half_extent_min: float = 0.05
    half_extent_max: float = 0.12
    stacked_scale_min: float = 0.4
    stacked_scale_max: float = 0.9


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    half_extents: tuple[float, float]
    color: tuple[float, float, float]
    height_class: int = 0


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float


@dataclass(frozen=True)
class GoalPredicate:
    kind: PredicateKind
    subject: int
    reference: int

    def __post_init__(self):
        if self.subject == self.reference:
            raise ValueError("subject and reference must differ")


@dataclass(frozen=True)
class Scene:
    objects: tuple[tuple[ObjectSpec, Pose2], ...]
    on_top_of: Mapping[int, int] = field(default_factory=dict)
    rng_seed: int = 0

    @property
    def ids(self) -> list[int]:
        return [spec.id for spec, _ in self.objects]

    def spec(self, obj_id: int) -> ObjectSpec:
        for spec, _ in self.objects:
            if spec.id == obj_id:
                return spec
        raise UnknownObject(obj_id)

    def pose(self, obj_id: int) -> Pose2:
        for spec, pose in self.objects:
            if spec.id == obj_id:
                return pose
        raise UnknownObject(obj_id)

    def poses(self) -> dict[int, Pose2]:
        return {spec.id: pose for spec, pose in self.objects}

    def specs(self) -> dict[int, ObjectSpec]:
        return {spec.id: spec for spec, _ in self.objects}

    def with_poses(self, poses: Mapping[int, Pose2], on_top_of: Mapping[int, int] | None = None) -> "Scene":
        """Copy with some poses replaced. Height classes follow ``on_top_of``."""
        support = dict(self.on_top_of if on_top_of is None else on_top_of)
        objects = []
        for spec, pose in self.objects:
            hc = 1 if spec.id in support else 0
            if hc != spec.height_class:
                spec = ObjectSpec(spec.id, spec.half_extents, spec.color, hc)
            objects.append((spec, poses.get(spec.id, pose)))
        return Scene(tuple(objects), support, self.rng_seed)


def _q(v: float) -> float:
    return round(float(v), DECIMALS)


def footprints_overlap(a: tuple[ObjectSpec, Pose2], b: tuple[ObjectSpec, Pose2]) -> bool:
    """True iff the closed footprints intersect with positive area."""
    (sa, pa), (sb, pb) = a, b
    return (
        abs(pa.x - pb.x) < sa.half_extents[0] + sb.half_extents[0]
        and abs(pa.y - pb.y) < sa.half_extents[1] + sb.half_extents[1]
    )


def contains(outer: tuple[ObjectSpec, Pose2], inner: tuple[ObjectSpec, Pose2]) -> bool:
    (so, po), (si, pi) = outer, inner
    return (
        pi.x - si.half_extents[0] >= po.x - so.half_extents[0]
        and pi.x + si.half_extents[0] <= po.x + so.half_extents[0]
        and pi.y - si.half_extents[1] >= po.y - so.half_extents[1]
        and pi.y + si.half_extents[1] <= po.y + so.half_extents[1]
    )


def validate_scene(scene: Scene) -> None:
    """Raise ValueError if any scene invariant is violated."""
    specs = scene.specs()
    if len(specs) != len(scene.objects):
        raise ValueError("duplicate object ids")
    for spec, pose in scene.objects:
        hx, hy = spec.half_extents
        if not (0 < hx <= 0.25 and 0 < hy <= 0.25):
            raise ValueError(f"object {spec.id}: half extents out of range")
        if not (np.isfinite(pose.x) and np.isfinite(pose.y)):
            raise ValueError(f"object {spec.id}: non-finite pose")
        if pose.x - hx < 0 or pose.x + hx > 1 or pose.y - hy < 0 or pose.y + hy > 1:
            raise ValueError(f"object {spec.id}: outside workspace")
        expected = 1 if spec.id in scene.on_top_of else 0
        if spec.height_class != expected:
            raise ValueError(f"object {spec.id}: height_class disagrees with on_top_of")
    colors = [np.asarray(s.color) for s, _ in scene.objects]
    for i in range(len(colors)):
        for j in range(i + 1, len(colors)):
            if np.max(np.abs(colors[i] - colors[j])) < MIN_COLOR_DISTANCE - 1e-9:
                raise ValueError("object colors not distinct")
    table = [(s, p) for s, p in scene.objects if s.height_class == 0]
    for i in range(len(table)):
        for j in range(i + 1, len(table)):
            if footprints_overlap(table[i], table[j]):
                raise ValueError(f"objects {table[i][0].id} and {table[j][0].id} overlap")
    for top, below in scene.on_top_of.items():
        if below not in specs or top not in specs:
            raise ValueError("on_top_of refers to unknown object")
        if specs[below].height_class != 0:
            raise ValueError("stacking deeper than one level")
        if not contains((specs[below], scene.pose(below)), (specs[top], scene.pose(top))):
            raise ValueError(f"object {top} not contained in its support {below}")


def _sample_colors(rng: np.random.Generator, n: int) -> list[tuple[float, float, float]]:
    avoid = [np.asarray(SCENE_BACKGROUND), np.asarray(VIEW_BACKGROUND)]
    colors: list[np.ndarray] = []
    for _ in range(n):
        for _ in range(MAX_PLACEMENT_TRIES):
            c = np.round(rng.uniform(0.0, 1.0, 3), DECIMALS)
            if all(np.max(np.abs(c - other)) >= MIN_COLOR_DISTANCE for other in colors + avoid):
                colors.append(c)
                break
        else:
            raise PlacementExhausted("could not draw a distinct color")
    return [tuple(float(v) for v in c) for c in colors]


def sample_scene(n_objects: int, seed: int, stack_one: bool = False, config: SceneConfig | None = None) -> Scene:
    """Random non-overlapping arrangement, optionally with one object stacked on another."""
    if not 3 <= n_objects <= 10:
        raise ValueError("n_objects must lie in [3, 10]")
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    colors = _sample_colors(rng, n_objects)
    n_table = n_objects - 1 if stack_one else n_objects

    placed: list[tuple[ObjectSpec, Pose2]] = []
    for i in range(n_table):
        he = tuple(_q(v) for v in rng.uniform(cfg.half_extent_min, cfg.half_extent_max, 2))
        spec = ObjectSpec(i, he, colors[i], 0)
        for _ in range(MAX_PLACEMENT_TRIES):
            pose = Pose2(_q(rng.uniform(he[0], 1 - he[0])), _q(rng.uniform(he[1], 1 - he[1])))
            if pose.x - he[0] < 0 or pose.x + he[0] > 1 or pose.y - he[1] < 0 or pose.y + he[1] > 1:
                continue
            if not any(footprints_overlap((spec, pose), other) for other in placed):
                placed.append((spec, pose))
                break
        else:
            raise PlacementExhausted(f"could not place object {i} after {MAX_PLACEMENT_TRIES} samples")

    on_top_of: dict[int, int] = {}
    if stack_one:
        support_spec, support_pose = placed[int(rng.integers(n_table))]
        sx, sy = support_spec.half_extents
        scale = rng.uniform(cfg.stacked_scale_min, cfg.stacked_scale_max, 2)
        he = (_q(sx * scale[0]), _q(sy * scale[1]))
        spec = ObjectSpec(n_table, he, colors[n_table], 1)
        for _ in range(MAX_PLACEMENT_TRIES):
            pose = Pose2(
                _q(rng.uniform(support_pose.x - sx + he[0], support_pose.x + sx - he[0])),
                _q(rng.uniform(support_pose.y - sy + he[1], support_pose.y + sy - he[1])),
            )
            if contains((support_spec, support_pose), (spec, pose)):
                break
        else:
            raise PlacementExhausted("could not stack object")
        placed.append((spec, pose))
        on_top_of[spec.id] = support_spec.id

    return Scene(tuple(placed), on_top_of, int(seed))


def eval_predicate(scene: Scene, g: GoalPredicate, margin: float = DEFAULT_MARGIN) -> bool:
    a_spec, a = scene.spec(g.subject), scene.pose(g.subject)
    b_spec, b = scene.spec(g.reference), scene.pose(g.reference)
    (ahx, ahy), (bhx, bhy) = a_spec.half_extents, b_spec.half_extents
    if g.kind is PredicateKind.OnLeft:
        return a.x + ahx <= b.x - bhx - margin
    if g.kind is PredicateKind.OnRight:
        return a.x - ahx >= b.x + bhx + margin
    if g.kind is PredicateKind.InFront:
        return a.y - ahy >= b.y + bhy + margin
    if g.kind is PredicateKind.Behind:
        return a.y + ahy <= b.y - bhy - margin
    return scene.on_top_of.get(g.subject) == g.reference


def _paint(grid: np.ndarray, centers: np.ndarray, x: float, y: float, hx: float, hy: float, color) -> None:
    cols = np.nonzero((centers >= x - hx) & (centers <= x + hx))[0]
    rows = np.nonzero((centers >= y - hy) & (centers <= y + hy))[0]
    if len(cols) and len(rows):
        grid[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = color


def rasterize_scene(scene: Scene) -> np.ndarray:
    """Orthographic top-down image (rows follow +y, columns follow +x).

    A pixel takes an object's color when its center lies inside the closed
    footprint. Stacked objects are painted after table-level ones.
    """
    grid = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    centers = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
    for spec, pose in sorted(scene.objects, key=lambda o: (o[0].height_class, o[0].id)):
        hx, hy = spec.half_extents
        _paint(grid, centers, pose.x, pose.y, hx, hy, np.asarray(spec.color, dtype=np.float32))
    return grid


def render_canonical_view(spec: ObjectSpec, view_index: int) -> np.ndarray:
    """32x32 sprite of one object on a gray background, one of four fixed variants."""
    if not 0 <= view_index < N_VIEWS:
        raise ValueError("view_index must lie in [0, 4)")
    rotated, scale = _VIEW_VARIANTS[view_index]
    hx, hy = spec.half_extents
    if rotated:
        hx, hy = hy, hx
    px = _VIEW_PX_PER_UNIT * scale
    patch = np.empty((VIEW_SIZE, VIEW_SIZE, 3), dtype=np.float32)
    patch[:] = np.asarray(VIEW_BACKGROUND, dtype=np.float32)
    centers = np.arange(VIEW_SIZE) + 0.5 - VIEW_SIZE / 2
    _paint(patch, centers, 0.0, 0.0, max(hx * px, 0.5), max(hy * px, 0.5), np.asarray(spec.color, dtype=np.float32))
    return patch


def scene_to_dict(scene: Scene) -> dict:
    return {
        "objects": [
            {
                "id": spec.id,
                "half_extents": [_q(v) for v in spec.half_extents],
                "color": [_q(v) for v in spec.color],
                "height_class": spec.height_class,
                "x": _q(pose.x),
                "y": _q(pose.y),
            }
            for spec, pose in scene.objects
        ],
        "on_top_of": {str(k): v for k, v in sorted(scene.on_top_of.items())},
        "seed": scene.rng_seed,
    }


def scene_from_dict(d: Mapping) -> Scene:
    objects = tuple(
        (
            ObjectSpec(int(o["id"]), tuple(o["half_extents"]), tuple(o["color"]), int(o["height_class"])),
            Pose2(float(o["x"]), float(o["y"])),
        )
        for o in d["objects"]
    )
    return Scene(objects, {int(k): int(v) for k, v in d["on_top_of"].items()}, int(d["seed"]))


def scene_to_json(scene: Scene) -> str:
    """Canonical one-line JSON (sorted keys, 6-decimal coordinates)."""
    return json.dumps(scene_to_dict(scene), sort_keys=True, separators=(",", ":"))


def scene_from_json(line: str) -> Scene:
    return scene_from_dict(json.loads(line))


def goal_to_dict(g: GoalPredicate) -> dict:
    return {"kind": g.kind.value, "subject": g.subject, "reference": g.reference}


def goal_from_dict(d: Mapping) -> GoalPredicate:
    return GoalPredicate(PredicateKind.parse(d["kind"]), int(d["subject"]), int(d["reference"]))


def table_level_ids(scene: Scene) -> list[int]:
    return [s.id for s, _ in scene.objects if s.height_class == 0]

