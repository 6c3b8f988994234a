"""Scripted expert and biased demonstration collection.

Demonstrations store observations sparsely: every observation entry is 0 or 1,
so a step keeps the sorted indices of its ones. ``densify`` recovers the
vector.
"""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .seeding import derive_seed
from .sim import (
    Action,
    PlaceOn,
    Scene,
    Sequence,
    build_scene,
    check_success,
    in_rect,
    observation_indices,
    observation_size,
    rect_cells,
    sequence_progress,
    step,
)
from .suites import BiasProfile, Observedness, SceneTaskSet, TaskSpec


class ExpertFailure(RuntimeError):
    pass


class MalformedRecord(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


# ---------------------------------------------------------------------------
# Expert
# ---------------------------------------------------------------------------


def _toward(src, dst) -> Action:
    # columns (x) before rows (y)
    if dst[1] > src[1]:
        return Action.RIGHT
    if dst[1] < src[1]:
        return Action.LEFT
    if dst[0] < src[0]:
        return Action.UP
    if dst[0] > src[0]:
        return Action.DOWN
    return Action.NOOP


def _current_subgoal(scene: Scene, task: TaskSpec):
    pred = task.success_predicate
    if not isinstance(pred, Sequence):
        return None if check_success(scene, pred) else pred
    done = sequence_progress(scene, pred)
    return None if done == len(pred.steps) else pred.steps[done]


def _drop_cell(scene: Scene, region_name: str):
    """Nearest free cell of a goal region (row-major tie-break)."""
    g = scene.gripper.position
    taken = {o.position for o in scene.objects if not o.held}
    cells = [c for c in rect_cells(scene.goal_regions[region_name]) if c not in taken]
    if not cells:
        cells = rect_cells(scene.goal_regions[region_name])
    return min(cells, key=lambda c: (abs(c[0] - g[0]) + abs(c[1] - g[1]), c))


def scripted_expert_action(scene: Scene, task: TaskSpec) -> Action:
    """Greedy shortest-path expert; emits noop once the task is complete."""
    sub = _current_subgoal(scene, task)
    if sub is None:
        return Action.NOOP
    g = scene.gripper
    if g.holding is not None and g.holding != sub.target:
        return Action.RELEASE
    if g.holding == sub.target:
        if not isinstance(sub, PlaceOn):
            return Action.NOOP
        region = scene.goal_regions[sub.region]
        if in_rect(g.position, region) and not any(
            o.position == g.position and not o.held for o in scene.objects
        ):
            return Action.RELEASE
        return _toward(g.position, _drop_cell(scene, sub.region))
    target = scene.obj(sub.target).position
    if g.position == target:
        return Action.GRASP
    return _toward(g.position, target)


def expert_rollout(s: SceneTaskSet, task: TaskSpec, seed: int, layout=None):
    """Run the expert from a fresh scene; return (observations, actions).

    A final ``noop`` is recorded on the completed state.
    """
    scene = build_scene(layout if layout is not None else s.layout, seed)
    obs, acts = [], []
    while not check_success(scene, task):
        if scene.t >= task.horizon:
            raise ExpertFailure(f"expert exceeded horizon {task.horizon} on {task.id} (seed {seed})")
        a = scripted_expert_action(scene, task)
        obs.append(observation_indices(scene))
        acts.append(int(a))
        step(scene, a)
    obs.append(observation_indices(scene))
    acts.append(int(Action.NOOP))
    return obs, acts


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Demonstration:
    task_id: str
    instruction: tuple[str, ...]
    observations: list[tuple[int, ...]]
    actions: list[int]
    seed: int

    def __post_init__(self):
        if not self.actions or len(self.actions) != len(self.observations):
            raise ValueError("demonstration must be non-empty with one action per observation")


@dataclass
class DemoDataset:
    demonstrations: list[Demonstration]
    obs_dim: int
    width: int = 9
    height: int = 9
    n_classes: int = 12
    counts: dict[str, int] = field(init=False)
    class_coverage: frozenset = field(init=False)

    def __post_init__(self):
        self.counts = dict(Counter(d.task_id for d in self.demonstrations))
        cells = self.width * self.height
        self.class_coverage = frozenset(
            i // cells
            for d in self.demonstrations
            for o in d.observations
            for i in o
            if i < self.n_classes * cells
        )

    def __len__(self):
        return len(self.demonstrations)

    def __eq__(self, other):
        return (
            isinstance(other, DemoDataset)
            and self.obs_dim == other.obs_dim
            and (self.width, self.height, self.n_classes) == (other.width, other.height, other.n_classes)
            and self.demonstrations == other.demonstrations
        )

    @property
    def n_steps(self) -> int:
        return sum(len(d.actions) for d in self.demonstrations)


def demo_seed(seed: int, task_id: str, index: int) -> int:
    return derive_seed(seed, "demo", task_id, index) % 2**31


def _collect_one(args):
    s, task, seed, k = args
    sd = demo_seed(seed, task.id, k)
    obs, acts = expert_rollout(s, task, sd, layout=s.demo_layout())
    return Demonstration(task.id, task.instruction, obs, acts, sd)


def collect_demos(
    sets: list[SceneTaskSet],
    profile: BiasProfile = BiasProfile(),
    seed: int = 0,
    jobs: int = 1,
) -> DemoDataset:
    """Roll the expert ``profile.quota(task)`` times per task.

    Held-out objects are absent from every demonstration scene.
    """
    if profile.demos_ood != 0:
        raise ValueError("demos_ood must be 0: OOD targets may never be demonstrated")
    work = [(s, t, seed, k) for s in sets for t in s.tasks for k in range(profile.quota(t))]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            demos = list(ex.map(_collect_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        demos = [_collect_one(w) for w in work]
    layout = sets[0].layout if sets else None
    return DemoDataset(
        demos,
        obs_dim=observation_size(layout.width, layout.height, layout.n_classes) if layout else 0,
        width=layout.width if layout else 9,
        height=layout.height if layout else 9,
        n_classes=layout.n_classes if layout else 12,
    )


def replay_audit(ds: DemoDataset, sets: list[SceneTaskSet]) -> dict:
    """Re-run every stored action sequence; check encodings and final success."""
    by_task = {t.id: (s, t) for s in sets for t in s.tasks}
    ok = 0
    failures = []
    for d in ds.demonstrations:
        s, task = by_task[d.task_id]
        scene = build_scene(s.demo_layout(), d.seed)
        good = True
        for o, a in zip(d.observations, d.actions):
            if observation_indices(scene) != tuple(o):
                good = False
                break
            step(scene, a)
        good = good and check_success(scene, task)
        ok += good
        if not good:
            failures.append((d.task_id, d.seed))
    return {"demonstrations": len(ds), "replayed_ok": ok, "success_rate": ok / max(len(ds), 1), "failures": failures}


def check_profile(ds: DemoDataset, sets: list[SceneTaskSet], profile: BiasProfile) -> bool:
    return all(ds.counts.get(t.id, 0) == profile.quota(t) for s in sets for t in s.tasks)


# ---------------------------------------------------------------------------
# ndjson: one demonstration per line
# ---------------------------------------------------------------------------


def save_dataset(ds: DemoDataset, path) -> None:
    with open(path, "w") as f:
        for d in ds.demonstrations:
            rec = {
                "task_id": d.task_id,
                "instruction": list(d.instruction),
                "seed": d.seed,
                "grid": [ds.width, ds.height, ds.n_classes],
                "obs_dim": ds.obs_dim,
                "steps": [[list(o), a] for o, a in zip(d.observations, d.actions)],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset(path) -> DemoDataset:
    demos = []
    grid = None
    obs_dim = 0
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                g = tuple(rec["grid"])
                obs_dim = int(rec["obs_dim"])
                if grid is not None and g != grid:
                    raise ValueError("grid differs from earlier records")
                grid = g
                obs = [tuple(int(i) for i in o) for o, _ in rec["steps"]]
                acts = [int(a) for _, a in rec["steps"]]
                if any(not 0 <= a < len(Action) for a in acts):
                    raise ValueError("action out of range")
                if any(i < 0 or i >= obs_dim for o in obs for i in o):
                    raise ValueError("observation index out of range")
                demos.append(Demonstration(rec["task_id"], tuple(rec["instruction"]), obs, acts, int(rec["seed"])))
            except (ValueError, KeyError, TypeError) as e:
                raise MalformedRecord(lineno, str(e)) from e
            if not line.endswith("\n"):
                raise MalformedRecord(lineno, "truncated record (no newline)")
    w, h, c = grid if grid is not None else (9, 9, 12)
    return DemoDataset(demos, obs_dim=obs_dim, width=w, height=h, n_classes=c)
