"""Discrete layer: symbolic states, pick/place actions and skeleton enumeration."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import AbstractSet, Iterator, Sequence

from relplan.errors import InapplicableAction, SubjectNotAllowed
from relplan.scene import GoalPredicate, Scene

MAX_MOVES_PER_OBJECT = 2
DEFAULT_K_MAX = 8


class ActionKind(str, enum.Enum):
    Pick = "P"
    Place = "L"


@dataclass(frozen=True, order=True)
class Action:
    kind: ActionKind
    object: int

    def __str__(self) -> str:
        return f"{self.kind.value}{self.object}"


def Pick(obj: int) -> Action:
    return Action(ActionKind.Pick, obj)


def Place(obj: int) -> Action:
    return Action(ActionKind.Place, obj)


@dataclass(frozen=True)
class SymbolicState:
    holding: int | None = None
    moved: tuple[int, ...] = ()
    cleared: frozenset[int] = frozenset()


@dataclass(frozen=True)
class Skeleton:
    actions: tuple[Action, ...]

    @property
    def K(self) -> int:
        return len(self.actions)

    @property
    def picks(self) -> tuple[int, ...]:
        return tuple(a.object for a in self.actions if a.kind is ActionKind.Pick)

    def __str__(self) -> str:
        return format_skeleton(self)


def theta(a: Action) -> int:
    """The single object an action operates on."""
    return a.object


def format_skeleton(sk: Skeleton) -> str:
    return ";".join(str(a) for a in sk.actions)


def parse_skeleton(text: str) -> Skeleton:
    if not text:
        return Skeleton(())
    actions = []
    for tok in text.split(";"):
        actions.append(Action(ActionKind(tok[0]), int(tok[1:])))
    return Skeleton(tuple(actions))


def skeleton_from_picks(picks: Sequence[int]) -> Skeleton:
    return Skeleton(tuple(a for o in picks for a in (Pick(o), Place(o))))


def _is_clear(obj: int, state: SymbolicState, scene: Scene) -> bool:
    # Objects only ever leave their support; once moved they rest on the table.
    for top, below in scene.on_top_of.items():
        if below == obj and top not in state.moved and top != state.holding:
            return False
    return True


def applicable_actions(state: SymbolicState, scene: Scene) -> list[Action]:
    if state.holding is not None:
        return [Place(state.holding)]
    return [
        Pick(o)
        for o in sorted(scene.ids)
        if _is_clear(o, state, scene) and state.moved.count(o) < MAX_MOVES_PER_OBJECT
    ]


def succ(state: SymbolicState, a: Action, scene: Scene | None = None) -> SymbolicState:
    """Successor state. With ``scene`` given, the clear-object rule is checked too."""
    if a.kind is ActionKind.Pick:
        if state.holding is not None or state.moved.count(a.object) >= MAX_MOVES_PER_OBJECT:
            raise InapplicableAction(f"cannot {a}: holding={state.holding}")
        if scene is not None and not _is_clear(a.object, state, scene):
            raise InapplicableAction(f"cannot {a}: object is not clear")
        return SymbolicState(a.object, state.moved, state.cleared | {a.object})
    if state.holding != a.object:
        raise InapplicableAction(f"cannot {a}: holding={state.holding}")
    return SymbolicState(None, state.moved + (a.object,), state.cleared - {a.object})


def run_skeleton(scene: Scene, sk: Skeleton, state: SymbolicState | None = None) -> SymbolicState:
    state = state or SymbolicState()
    for a in sk.actions:
        if a not in applicable_actions(state, scene):
            raise InapplicableAction(f"{a} not applicable in {state}")
        state = succ(state, a, scene)
    return state


def enumerate_skeletons(
    scene: Scene, g: GoalPredicate, allowed: AbstractSet[int], k_max: int = DEFAULT_K_MAX
) -> Iterator[Skeleton]:
    """Valid skeletons over ``allowed`` ending in Place(subject).

    Yields by increasing K, then lexicographically by object ids; lazy.
    """
    if g.subject not in allowed:
        raise SubjectNotAllowed(f"goal subject {g.subject} not in allowed set")
    if k_max % 2 or not 2 <= k_max <= 12:
        raise ValueError("k_max must be even and within [2, 12]")
    allowed = frozenset(allowed)

    def extend(state: SymbolicState, picks: list[int], remaining: int) -> Iterator[list[int]]:
        for a in applicable_actions(state, scene):
            if a.object not in allowed:
                continue
            if remaining == 1 and a.object != g.subject:
                continue
            after = succ(succ(state, a), Place(a.object))
            picks.append(a.object)
            if remaining == 1:
                yield list(picks)
            else:
                yield from extend(after, picks, remaining - 1)
            picks.pop()

    for n_pairs in range(1, k_max // 2 + 1):
        for picks in extend(SymbolicState(), [], n_pairs):
            yield skeleton_from_picks(picks)
