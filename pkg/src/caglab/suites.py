"""Counterfactual suites: scenes with one well-demonstrated task and alternatives.

Every scene-task set holds a layout, one in-domain task whose target is the
scene's training-task object (the visual attractor), and two counterfactual
tasks that are feasible in the same layout but under-observed or unseen.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .seeding import rng_for
from .sim import (
    N_CLASSES,
    ObjectSpec,
    PlaceOn,
    Predicate,
    SceneLayout,
    Sequence,
    build_scene,
    predicate_from_dict,
    predicate_steps,
    referenced_objects,
)

CLASS_NAMES = (
    "bowl", "plate", "mug", "apple", "banana", "box",
    "can", "cup", "spoon", "block", "ketchup", "pringles",
)
SPATIAL_WORDS = ("left", "middle", "right")
# "then_<name>" marks the second sub-goal so that the bag-of-tokens
# encoding still tells "A then B" from "B then A".
VOCAB = (
    ("put", "the", "on", "tray")
    + SPATIAL_WORDS
    + CLASS_NAMES
    + tuple(f"then_{n}" for n in CLASS_NAMES)
)
TOKEN_INDEX = {tok: i for i, tok in enumerate(VOCAB)}

DEFAULT_HELD_OUT = (10, 11)
GRID = 9
GRIPPER_START = (8, 4)
TRAY = (7, 0, 8, 1)
# Object placement regions, one per spatial word. Placement jitter is
# vertical only: wider regions wash out the single under-observed demo.
REGIONS = {
    "left": (2, 1, 3, 1),
    "middle": (2, 4, 3, 4),
    "right": (2, 7, 3, 7),
}
HORIZON = 60
LONG_HORIZON = 120
DEFAULT_SCENES = {"CFSpatial": 6, "CFObject": 4, "CFLong": 4, "CFOOD": 6}


class SuiteKind(str, Enum):
    CFSpatial = "CFSpatial"
    CFObject = "CFObject"
    CFLong = "CFLong"
    CFOOD = "CFOOD"


class Observedness(str, Enum):
    InDomain = "InDomain"
    UnderObserved = "UnderObserved"
    OOD = "OOD"


class NotRemovable(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    id: str
    instruction: tuple[str, ...]
    target_object_id: int
    success_predicate: Predicate
    horizon: int
    observedness: Observedness
    spatial_selector: Optional[str] = None

    def __post_init__(self):
        bad = [t for t in self.instruction if t not in TOKEN_INDEX]
        if bad:
            raise ValueError(f"instruction tokens outside the vocabulary: {bad}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def text(self) -> str:
        return " ".join(self.instruction)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "instruction": list(self.instruction),
            "target_object_id": self.target_object_id,
            "success_predicate": self.success_predicate.to_dict(),
            "horizon": self.horizon,
            "observedness": self.observedness.value,
            "spatial_selector": self.spatial_selector,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            id=d["id"],
            instruction=tuple(d["instruction"]),
            target_object_id=int(d["target_object_id"]),
            success_predicate=predicate_from_dict(d["success_predicate"]),
            horizon=int(d["horizon"]),
            observedness=Observedness(d["observedness"]),
            spatial_selector=d.get("spatial_selector"),
        )


@dataclass(frozen=True)
class SceneTaskSet:
    id: str
    kind: SuiteKind
    layout: SceneLayout
    in_domain: Optional[TaskSpec]
    counterfactuals: tuple[TaskSpec, ...]
    held_out_classes: tuple[int, ...] = ()
    focused: bool = False

    @property
    def tasks(self) -> tuple[TaskSpec, ...]:
        head = (self.in_domain,) if self.in_domain is not None else ()
        return head + tuple(self.counterfactuals)

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)

    def build_scene(self, seed: int):
        return build_scene(self.layout, seed)

    def demo_layout(self) -> SceneLayout:
        """Layout used for demonstrations: held-out objects never appear."""
        hidden = [o.id for o in self.layout.objects if o.class_id in self.held_out_classes]
        return self.layout.without(hidden) if hidden else self.layout

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "layout": self.layout.to_dict(),
            "in_domain": None if self.in_domain is None else self.in_domain.to_dict(),
            "counterfactuals": [t.to_dict() for t in self.counterfactuals],
            "held_out_classes": list(self.held_out_classes),
            "focused": self.focused,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneTaskSet":
        return cls(
            id=d["id"],
            kind=SuiteKind(d["kind"]),
            layout=SceneLayout.from_dict(d["layout"]),
            in_domain=None if d["in_domain"] is None else TaskSpec.from_dict(d["in_domain"]),
            counterfactuals=tuple(TaskSpec.from_dict(t) for t in d["counterfactuals"]),
            held_out_classes=tuple(d.get("held_out_classes", ())),
            focused=bool(d.get("focused", False)),
        )


@dataclass(frozen=True)
class BiasProfile:
    demos_in_domain: int = 200
    demos_under_observed: int = 1
    demos_ood: int = 0

    def __post_init__(self):
        if min(self.demos_in_domain, self.demos_under_observed, self.demos_ood) < 0:
            raise ValueError("demo counts must be non-negative")

    def quota(self, task: TaskSpec) -> int:
        return {
            Observedness.InDomain: self.demos_in_domain,
            Observedness.UnderObserved: self.demos_under_observed,
            Observedness.OOD: self.demos_ood,
        }[task.observedness]


# ---------------------------------------------------------------------------
# Suite construction
# ---------------------------------------------------------------------------


def _layout(objects, training_task_object_id) -> SceneLayout:
    return SceneLayout(
        width=GRID,
        height=GRID,
        objects=tuple(objects),
        gripper_start=GRIPPER_START,
        goal_regions={"tray": TRAY},
        training_task_object_id=training_task_object_id,
    )


def _place_instruction(name: str, spatial: Optional[str] = None) -> tuple[str, ...]:
    head = ("put", "the") + ((spatial,) if spatial else ())
    return head + (name, "on", "the", "tray")


def _triples(rng: np.random.Generator, pool: list[int], n: int, parity: int) -> list[tuple[int, ...]]:
    # Object and Long suites draw from disjoint halves of the class-triple
    # space, so no two scenes in a benchmark look alike.
    combos = [c for c in itertools.combinations(pool, 3) if sum(c) % 2 == parity]
    order = rng.permutation(len(combos))
    return [tuple(int(x) for x in rng.permutation(combos[order[i % len(combos)]])) for i in range(n)]


def make_suite(
    kind: SuiteKind | str,
    n_scenes: int,
    seed: int,
    held_out: tuple[int, ...] = DEFAULT_HELD_OUT,
) -> list[SceneTaskSet]:
    kind = SuiteKind(kind)
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if kind is SuiteKind.CFOOD and not held_out:
        raise ValueError("CFOOD needs a non-empty held-out class set")
    rng = rng_for(seed, "suite", kind.value)
    familiar = [c for c in range(N_CLASSES) if c not in held_out]
    regions = list(REGIONS)
    out = []

    if kind in (SuiteKind.CFObject, SuiteKind.CFLong):
        triples = _triples(rng, familiar, n_scenes, parity=0 if kind is SuiteKind.CFObject else 1)
    else:
        order = rng.permutation(len(familiar))
        classes = [familiar[order[i % len(familiar)]] for i in range(n_scenes)]

    for i in range(n_scenes):
        set_id = f"{kind.value}-{i:02d}"
        slots = [regions[j] for j in rng.permutation(3)]

        if kind is SuiteKind.CFSpatial:
            cls = int(classes[i])
            objects = [ObjectSpec(k, cls, REGIONS[w]) for k, w in enumerate(regions)]
            trained = int(rng.integers(3))
            tasks = []
            for k, w in enumerate(regions):
                tasks.append(
                    TaskSpec(
                        id=f"{set_id}/{'in' if k == trained else w}",
                        instruction=_place_instruction(CLASS_NAMES[cls], w),
                        target_object_id=k,
                        success_predicate=PlaceOn(k, "tray"),
                        horizon=HORIZON,
                        observedness=Observedness.InDomain if k == trained else Observedness.UnderObserved,
                        spatial_selector=w,
                    )
                )
            in_domain = tasks[trained]
            cfs = tuple(t for k, t in enumerate(tasks) if k != trained)
            attractor = trained

        elif kind is SuiteKind.CFObject:
            triple = triples[i]
            objects = [ObjectSpec(k, c, REGIONS[slots[k]]) for k, c in enumerate(triple)]
            attractor = 0
            tasks = [
                TaskSpec(
                    id=f"{set_id}/{'in' if k == 0 else CLASS_NAMES[c]}",
                    instruction=_place_instruction(CLASS_NAMES[c]),
                    target_object_id=k,
                    success_predicate=PlaceOn(k, "tray"),
                    horizon=HORIZON,
                    observedness=Observedness.InDomain if k == 0 else Observedness.UnderObserved,
                )
                for k, c in enumerate(triple)
            ]
            in_domain, cfs = tasks[0], tuple(tasks[1:])

        elif kind is SuiteKind.CFLong:
            a, b, c = triples[i]
            objects = [ObjectSpec(k, cl, REGIONS[slots[k]]) for k, cl in enumerate((a, b, c))]
            attractor = 0
            na, nb = CLASS_NAMES[a], CLASS_NAMES[b]
            in_domain = TaskSpec(
                id=f"{set_id}/in",
                instruction=_place_instruction(na) + (f"then_{nb}",),
                target_object_id=0,
                success_predicate=Sequence((PlaceOn(0, "tray"), PlaceOn(1, "tray"))),
                horizon=LONG_HORIZON,
                observedness=Observedness.InDomain,
            )
            reversed_ = TaskSpec(
                id=f"{set_id}/reversed",
                instruction=_place_instruction(nb) + (f"then_{na}",),
                target_object_id=1,
                success_predicate=Sequence((PlaceOn(1, "tray"), PlaceOn(0, "tray"))),
                horizon=LONG_HORIZON,
                observedness=Observedness.UnderObserved,
            )
            prefix = TaskSpec(
                id=f"{set_id}/prefix",
                instruction=_place_instruction(na),
                target_object_id=0,
                success_predicate=Sequence((PlaceOn(0, "tray"),)),
                horizon=LONG_HORIZON,
                observedness=Observedness.UnderObserved,
            )
            cfs = (reversed_, prefix)

        else:  # CFOOD
            fam = int(classes[i])
            ho = sorted(held_out)
            triple = (fam, ho[0], ho[1 % len(ho)])
            objects = [ObjectSpec(k, cl, REGIONS[slots[k]]) for k, cl in enumerate(triple)]
            attractor = 0
            in_domain = TaskSpec(
                id=f"{set_id}/in",
                instruction=_place_instruction(CLASS_NAMES[fam]),
                target_object_id=0,
                success_predicate=PlaceOn(0, "tray"),
                horizon=HORIZON,
                observedness=Observedness.InDomain,
            )
            cfs = tuple(
                TaskSpec(
                    id=f"{set_id}/ood{k}",
                    instruction=_place_instruction(CLASS_NAMES[triple[k]]),
                    target_object_id=k,
                    success_predicate=PlaceOn(k, "tray"),
                    horizon=HORIZON,
                    observedness=Observedness.OOD,
                )
                for k in (1, 2)
            )

        out.append(
            SceneTaskSet(
                id=set_id,
                kind=kind,
                layout=_layout(objects, attractor),
                in_domain=in_domain,
                counterfactuals=cfs,
                held_out_classes=tuple(held_out) if kind is SuiteKind.CFOOD else (),
            )
        )
    return out


def make_benchmark(
    scenes: dict[str, int] | None = None,
    seed: int = 0,
    held_out: tuple[int, ...] = DEFAULT_HELD_OUT,
) -> list[SceneTaskSet]:
    scenes = DEFAULT_SCENES if scenes is None else scenes
    out = []
    for kind in SuiteKind:
        n = scenes.get(kind.value, 0)
        if n:
            out.extend(make_suite(kind, n, seed, held_out))
    return out


def apply_cf_focused(s: SceneTaskSet) -> SceneTaskSet:
    """Drop the training-task object and the in-domain task."""
    tt = s.layout.training_task_object_id
    if tt is None:
        raise NotRemovable(f"{s.id} has no training-task object")
    spec = next(o for o in s.layout.objects if o.id == tt)
    if not spec.removable:
        raise NotRemovable(f"training-task object {tt} of {s.id} is marked non-removable")
    for t in s.counterfactuals:
        if tt in referenced_objects(t.success_predicate):
            raise NotRemovable(f"counterfactual {t.id} references the training-task object {tt}")
    return replace(s, id=f"{s.id}-focused", layout=s.layout.without([tt]), in_domain=None, focused=True)


def is_strict_prefix(a: TaskSpec, b: TaskSpec) -> bool:
    sa, sb = predicate_steps(a.success_predicate), predicate_steps(b.success_predicate)
    return isinstance(a.success_predicate, Sequence) and len(sa) < len(sb) and sb[: len(sa)] == sa


def feasibility_check(s: SceneTaskSet, n_resets: int = 10, seed: int = 0) -> bool:
    """True iff the scripted expert completes every task within its horizon."""
    from .dataset import ExpertFailure, expert_rollout

    for task in s.tasks:
        for k in range(n_resets):
            try:
                expert_rollout(s, task, int(rng_for(seed, "feasibility", task.id, k).integers(2**31)))
            except ExpertFailure:
                return False
    return True


# ---------------------------------------------------------------------------
# Files: suites/<kind>/<index>.json
# ---------------------------------------------------------------------------


def suite_path(root: Path, s: SceneTaskSet) -> Path:
    index = int(s.id.rsplit("-", 1)[1])
    return Path(root) / "suites" / s.kind.value / f"{index}.json"


def dumps_set(s: SceneTaskSet) -> str:
    return json.dumps(s.to_dict(), indent=2, sort_keys=True) + "\n"


def save_sets(root: Path, sets: list[SceneTaskSet]) -> list[Path]:
    paths = []
    for s in sets:
        p = suite_path(root, s)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(dumps_set(s))
        paths.append(p)
    return paths


def load_sets(root: Path) -> list[SceneTaskSet]:
    base = Path(root) / "suites"
    sets = []
    for kind in SuiteKind:
        d = base / kind.value
        if not d.is_dir():
            continue
        files = sorted(d.glob("*.json"), key=lambda p: int(p.stem))
        sets.extend(SceneTaskSet.from_dict(json.loads(p.read_text())) for p in files)
    return sets
