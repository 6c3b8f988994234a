"""Discrete tabletop world: scenes, actions, contact events and success predicates.

Cells are ``(row, col)`` tuples; ``up`` decreases the row, ``right`` increases
the column. The flat index of a cell is ``row * width + col``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import NamedTuple, Optional, Sequence as Seq, Union

import numpy as np

Cell = tuple[int, int]
Rect = tuple[int, int, int, int]  # (row0, col0, row1, col1), inclusive

N_CLASSES = 12
MAX_PLACEMENT_TRIES = 1000


class PlacementInfeasible(ValueError):
    pass


class DanglingReference(LookupError):
    """A predicate names an object that is not in the scene."""


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    GRASP = 4
    RELEASE = 5
    NOOP = 6


N_ACTIONS = len(Action)

_MOVES = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}


def rect_cells(rect: Rect) -> list[Cell]:
    r0, c0, r1, c1 = rect
    return [(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]


def in_rect(cell: Cell, rect: Rect) -> bool:
    r0, c0, r1, c1 = rect
    return r0 <= cell[0] <= r1 and c0 <= cell[1] <= c1


# ---------------------------------------------------------------------------
# Layouts and scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    class_id: int
    region: Rect
    removable: bool = True


@dataclass(frozen=True)
class SceneLayout:
    """Recipe for a scene: object classes, placement regions and goal regions.

    Objects listed in ``absent`` are placed (so every other object lands on the
    same cell for a given seed) and then left out of the scene.
    """

    width: int
    height: int
    objects: tuple[ObjectSpec, ...]
    gripper_start: Cell
    goal_regions: dict[str, Rect]
    training_task_object_id: Optional[int] = None
    absent: tuple[int, ...] = ()
    n_classes: int = N_CLASSES

    def without(self, object_ids) -> "SceneLayout":
        absent = tuple(sorted(set(self.absent) | set(object_ids)))
        tt = self.training_task_object_id
        return replace(self, absent=absent, training_task_object_id=None if tt in absent else tt)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "n_classes": self.n_classes,
            "gripper_start": list(self.gripper_start),
            "goal_regions": {k: list(v) for k, v in sorted(self.goal_regions.items())},
            "objects": [
                {"id": o.id, "class_id": o.class_id, "region": list(o.region), "removable": o.removable}
                for o in self.objects
            ],
            "training_task_object_id": self.training_task_object_id,
            "absent": list(self.absent),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneLayout":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            n_classes=int(d.get("n_classes", N_CLASSES)),
            gripper_start=tuple(d["gripper_start"]),
            goal_regions={k: tuple(v) for k, v in d["goal_regions"].items()},
            objects=tuple(
                ObjectSpec(int(o["id"]), int(o["class_id"]), tuple(o["region"]), bool(o.get("removable", True)))
                for o in d["objects"]
            ),
            training_task_object_id=d.get("training_task_object_id"),
            absent=tuple(d.get("absent", ())),
        )


@dataclass
class ObjectInstance:
    id: int
    class_id: int
    position: Cell
    held: bool = False
    removable: bool = True


@dataclass
class GripperState:
    position: Cell
    holding: Optional[int] = None


@dataclass
class Scene:
    width: int
    height: int
    objects: list[ObjectInstance]
    gripper: GripperState
    goal_regions: dict[str, Rect]
    training_task_object_id: Optional[int] = None
    n_classes: int = N_CLASSES
    t: int = 0
    # sub-goal completion log: (t, "grasp" | "place", object_id, region or None)
    log: list = field(default_factory=list)

    def obj(self, object_id: int) -> ObjectInstance:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise DanglingReference(f"object {object_id} is not in the scene")

    def has(self, object_id: int) -> bool:
        return any(o.id == object_id for o in self.objects)

    def copy(self) -> "Scene":
        return copy.deepcopy(self)

    def signature(self) -> tuple:
        """Everything an observation can see."""
        return (
            self.gripper.position,
            self.gripper.holding,
            tuple((o.id, o.position, o.held) for o in self.objects),
        )

    def validate(self) -> None:
        def inside(cell):
            return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object identifiers must be unique")
        if not inside(self.gripper.position):
            raise ValueError("gripper outside the grid")
        for o in self.objects:
            if not inside(o.position):
                raise ValueError(f"object {o.id} outside the grid")
            if not 0 <= o.class_id < self.n_classes:
                raise ValueError(f"object {o.id} has class {o.class_id} outside the vocabulary")
            if o.held and (o.position != self.gripper.position or self.gripper.holding != o.id):
                raise ValueError(f"held object {o.id} is not in the gripper")
        if self.gripper.holding is not None and not self.obj(self.gripper.holding).held:
            raise ValueError("gripper holds an object not marked held")
        if self.training_task_object_id is not None and not self.has(self.training_task_object_id):
            raise ValueError("training_task_object_id refers to a missing object")


def build_scene(layout: SceneLayout, seed: int) -> Scene:
    """Place every object uniformly in its region, rejecting occupied cells."""
    rng = np.random.default_rng(seed)
    occupied: set[Cell] = set()
    objects = []
    for spec in layout.objects:
        r0, c0, r1, c1 = spec.region
        for _ in range(MAX_PLACEMENT_TRIES):
            cell = (int(rng.integers(r0, r1 + 1)), int(rng.integers(c0, c1 + 1)))
            if cell not in occupied:
                break
        else:
            raise PlacementInfeasible(
                f"object {spec.id} found no free cell in region {spec.region} "
                f"after {MAX_PLACEMENT_TRIES} tries"
            )
        occupied.add(cell)
        if spec.id not in layout.absent:
            objects.append(ObjectInstance(spec.id, spec.class_id, cell, removable=spec.removable))
    scene = Scene(
        width=layout.width,
        height=layout.height,
        objects=objects,
        gripper=GripperState(tuple(layout.gripper_start)),
        goal_regions=dict(layout.goal_regions),
        training_task_object_id=layout.training_task_object_id,
        n_classes=layout.n_classes,
    )
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


class Event(NamedTuple):
    kind: str  # "contact" | "grasp" | "release" | "move"
    object_id: Optional[int] = None


@dataclass
class StepOutcome:
    scene: Scene
    events: list[Event]
    terminated: bool = False


def step(scene: Scene, action: int, horizon: Optional[int] = None) -> StepOutcome:
    """Apply one action in place and report what happened.

    Invalid grasps and releases are silent no-ops. ``terminated`` is set once
    ``horizon`` steps have elapsed; task termination is the caller's business.
    """
    action = Action(action)
    events: list[Event] = []
    g = scene.gripper
    if action in _MOVES:
        dr, dc = _MOVES[action]
        r = min(max(g.position[0] + dr, 0), scene.height - 1)
        c = min(max(g.position[1] + dc, 0), scene.width - 1)
        g.position = (r, c)
        if g.holding is not None:
            scene.obj(g.holding).position = g.position
        events.append(Event("move"))
    elif action == Action.GRASP:
        if g.holding is None:
            here = [o for o in scene.objects if o.position == g.position and not o.held]
            if here:
                o = min(here, key=lambda o: o.id)
                o.held = True
                g.holding = o.id
                events.append(Event("grasp", o.id))
                scene.log.append((scene.t, "grasp", o.id, None))
    elif action == Action.RELEASE:
        if g.holding is not None:
            o = scene.obj(g.holding)
            o.held = False
            o.position = g.position
            g.holding = None
            events.append(Event("release", o.id))
            for name in sorted(scene.goal_regions):
                if in_rect(o.position, scene.goal_regions[name]):
                    scene.log.append((scene.t, "place", o.id, name))

    for o in sorted(scene.objects, key=lambda o: o.id):
        if not o.held and o.position == g.position:
            events.append(Event("contact", o.id))

    scene.t += 1
    return StepOutcome(scene, events, horizon is not None and scene.t >= horizon)


# ---------------------------------------------------------------------------
# Success predicates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pick:
    target: int

    def to_dict(self):
        return {"type": "Pick", "target": self.target}


@dataclass(frozen=True)
class PlaceOn:
    target: int
    region: str

    def to_dict(self):
        return {"type": "PlaceOn", "target": self.target, "region": self.region}


@dataclass(frozen=True)
class Sequence:
    steps: tuple[Union[Pick, PlaceOn], ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("Sequence must be non-empty")

    def to_dict(self):
        return {"type": "Sequence", "steps": [s.to_dict() for s in self.steps]}


Predicate = Union[Pick, PlaceOn, Sequence]


def predicate_from_dict(d: dict) -> Predicate:
    kind = d["type"]
    if kind == "Pick":
        return Pick(int(d["target"]))
    if kind == "PlaceOn":
        return PlaceOn(int(d["target"]), str(d["region"]))
    if kind == "Sequence":
        return Sequence(tuple(predicate_from_dict(s) for s in d["steps"]))
    raise ValueError(f"unknown predicate type {kind!r}")


def predicate_steps(pred: Predicate) -> tuple:
    return pred.steps if isinstance(pred, Sequence) else (pred,)


def referenced_objects(pred: Predicate) -> list[int]:
    return [s.target for s in predicate_steps(pred)]


def _log_match(entry, sub) -> bool:
    _, kind, oid, region = entry
    if isinstance(sub, Pick):
        return kind == "grasp" and oid == sub.target
    return kind == "place" and oid == sub.target and region == sub.region


def sequence_progress(scene: Scene, pred: Predicate) -> int:
    """Number of leading sub-goals completed in order, according to the log."""
    after = -1
    done = 0
    for sub in predicate_steps(pred):
        hit = next((e[0] for e in scene.log if e[0] > after and _log_match(e, sub)), None)
        if hit is None:
            break
        after = hit
        done += 1
    return done


def check_success(scene: Scene, task) -> bool:
    """Evaluate a task (or bare predicate) against the scene.

    Single-step predicates look at the current state; sequences are matched
    in order against the scene's sub-goal completion log.
    """
    pred = getattr(task, "success_predicate", task)
    for oid in referenced_objects(pred):
        if not scene.has(oid):
            raise DanglingReference(f"predicate references removed object {oid}")
    if isinstance(pred, Pick):
        return scene.obj(pred.target).held
    if isinstance(pred, PlaceOn):
        o = scene.obj(pred.target)
        if pred.region not in scene.goal_regions:
            raise DanglingReference(f"unknown goal region {pred.region!r}")
        return not o.held and in_rect(o.position, scene.goal_regions[pred.region])
    return sequence_progress(scene, pred) == len(pred.steps)


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


def observation_size(width: int, height: int, n_classes: int = N_CLASSES) -> int:
    return (n_classes + 1) * width * height + 1


def observation_indices(scene: Scene) -> tuple[int, ...]:
    """Sorted indices of the nonzero (all 1.0) entries of the observation."""
    cells = scene.width * scene.height
    idx = {o.class_id * cells + o.position[0] * scene.width + o.position[1] for o in scene.objects}
    gr, gc = scene.gripper.position
    idx.add(scene.n_classes * cells + gr * scene.width + gc)
    if scene.gripper.holding is not None:
        idx.add((scene.n_classes + 1) * cells)
    return tuple(sorted(idx))


def render_observation(scene: Scene) -> np.ndarray:
    """Binary occupancy channels per class, a gripper channel and a holding flag."""
    out = np.zeros(observation_size(scene.width, scene.height, scene.n_classes))
    out[list(observation_indices(scene))] = 1.0
    return out


def densify(indices: Seq[int], size: int) -> np.ndarray:
    out = np.zeros(size)
    out[list(indices)] = 1.0
    return out
