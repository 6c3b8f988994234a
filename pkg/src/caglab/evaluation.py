"""Closed-loop rollouts, faithful/biased outcome attribution and suite metrics."""

from __future__ import annotations

import csv
import io
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .guidance import ARGMAX, GuidanceConfig, Sample, Wiring, mix, select_action, single_branch
from .policy import encode_instruction, forward_logits, null_instruction
from .seeding import derive_seed
from .sim import Scene, check_success, observation_indices, observation_size, predicate_steps, step
from .suites import SceneTaskSet, TaskSpec, apply_cf_focused, is_strict_prefix


class AblationMode(str, Enum):
    VisionAndLanguage = "VisionAndLanguage"
    VisionOnly = "VisionOnly"
    LanguageOnly = "LanguageOnly"


class Grounding(str, Enum):
    Faithful = "FaithfulGrounded"
    Biased = "BiasedGrounded"
    Other = "OtherGrounded"
    Fail = "Fail"


class Success(str, Enum):
    Faithful = "FaithfulSuccess"
    Biased = "BiasedSuccess"
    No = "NoSuccess"


@dataclass(frozen=True)
class OutcomeClass:
    grounding: Grounding
    success: Success


@dataclass
class RolloutRecord:
    task_id: str
    trial: int
    seed: int
    actions: list[int] = field(default_factory=list)
    events: list[list] = field(default_factory=list)
    first_contact_object: Optional[int] = None
    first_grasp_cell: Optional[tuple[int, int]] = None
    succeeded_task: Optional[str] = None
    steps_used: int = 0
    # the policy reached a state it maps back to itself; nothing can change
    # before the horizon under argmax selection, so the episode is cut short
    stalled: bool = False


def trial_seed(base_seed: int, task_id: str, trial: int) -> int:
    return derive_seed(base_seed, "eval", task_id, trial) % 2**31


def _select(dists, rows, selection):
    if selection == ARGMAX:
        return [int(a) for a in np.argmax(dists.logp, axis=-1)]
    # dists covers only the active rows; selection is indexed by trial
    return [selection[i].draw(dists.probs[row]) for row, i in enumerate(rows)]


def _finished_task(scene: Scene, s: SceneTaskSet, instructed: TaskSpec, prefix_of: dict):
    """Returns (done, best satisfied task id or None)."""
    sat = [t for t in s.tasks if check_success(scene, t)]
    if not sat:
        return False, None
    done = any(not prefix_of[t.id] for t in sat)
    order = {t.id: i for i, t in enumerate(s.tasks)}
    best = max(
        sat,
        key=lambda t: (len(predicate_steps(t.success_predicate)), t.id == instructed.id, -order[t.id]),
    )
    return done, best.id


def rollout_batch(
    s: SceneTaskSet,
    task: TaskSpec,
    seeds: Sequence[int],
    cfg: GuidanceConfig,
    mode: AblationMode = AblationMode.VisionAndLanguage,
    selection: Union[str, Sequence[Sample]] = ARGMAX,
    instruction: Optional[Sequence[str]] = None,
    trials: Optional[Sequence[int]] = None,
) -> list[RolloutRecord]:
    """Roll out one task from several scene seeds in lockstep.

    Each step: encode, run the branch forward passes, mix, select, step. An
    episode ends when a task of the set is satisfied that is not a strict
    prefix of another task of the set, or at the horizon.
    """
    cfg.validate()
    mode = AblationMode(mode)
    n = len(seeds)
    trials = list(range(n)) if trials is None else list(trials)
    scenes = [s.build_scene(sd) for sd in seeds]
    recs = [RolloutRecord(task.id, tr, sd) for tr, sd in zip(trials, seeds)]
    if not scenes:
        return recs
    lay = s.layout
    d_obs = observation_size(lay.width, lay.height, lay.n_classes)
    instr = encode_instruction(task.instruction if instruction is None else instruction)
    null = null_instruction()
    cond_instr = null if mode is AblationMode.VisionOnly else instr
    prefix_of = {t.id: any(is_strict_prefix(t, u) for u in s.tasks) for t in s.tasks}
    active = list(range(n))

    while active:
        obs = np.zeros((len(active), d_obs))
        if mode is not AblationMode.LanguageOnly:
            for row, i in enumerate(active):
                obs[row, list(observation_indices(scenes[i]))] = 1.0
        lc = forward_logits(cfg.cond_params, obs, cond_instr)
        if cfg.dual:
            lu = forward_logits(cfg.uncond_params, obs, null)
            dists = mix(lc, lu, cfg.omega, cfg.space)
        else:
            dists = single_branch(lc)
        acts = _select(dists, active, selection)

        still = []
        for i, a in zip(active, acts):
            sc, rec = scenes[i], recs[i]
            before = sc.signature()
            out = step(sc, a)
            rec.actions.append(a)
            rec.events.append([tuple(e) for e in out.events])
            for e in out.events:
                if e.kind == "contact" and rec.first_contact_object is None:
                    rec.first_contact_object = e.object_id
                if e.kind == "grasp" and rec.first_grasp_cell is None:
                    rec.first_grasp_cell = sc.gripper.position
            done, best = _finished_task(sc, s, task, prefix_of)
            rec.succeeded_task = best
            rec.steps_used = sc.t
            if done or sc.t >= task.horizon:
                continue
            if selection == ARGMAX and sc.signature() == before:
                rec.stalled = True
                continue
            still.append(i)
        active = still
    return recs


def rollout(
    s: SceneTaskSet,
    task: TaskSpec,
    scene_seed: int,
    cfg: GuidanceConfig,
    mode: AblationMode = AblationMode.VisionAndLanguage,
    selection: Union[str, Sample] = ARGMAX,
    instruction: Optional[Sequence[str]] = None,
) -> RolloutRecord:
    sel = selection if selection == ARGMAX else [selection]
    return rollout_batch(s, task, [scene_seed], cfg, mode, sel, instruction)[0]


def classify_outcome(rec: RolloutRecord, s: SceneTaskSet, instructed: TaskSpec) -> OutcomeClass:
    indomain = s.in_domain
    fc = rec.first_contact_object
    if fc is None:
        g = Grounding.Fail
    elif fc == instructed.target_object_id:
        g = Grounding.Faithful
    elif indomain is not None and fc == indomain.target_object_id:
        g = Grounding.Biased
    else:
        g = Grounding.Other
    if rec.succeeded_task == instructed.id:
        r = Success.Faithful
    elif indomain is not None and rec.succeeded_task == indomain.id:
        r = Success.Biased  # includes over-execution of a prefix instruction
    else:
        r = Success.No
    return OutcomeClass(g, r)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class TaskTally:
    suite: str
    set_id: str
    task_id: str
    in_domain: bool
    attempts: int = 0
    grounding: Counter = field(default_factory=Counter)  # Grounding -> count
    success: Counter = field(default_factory=Counter)  # Success -> count
    executed: Counter = field(default_factory=Counter)  # task id | "none" -> count
    contacts: Counter = field(default_factory=Counter)  # object id | "none" -> count

    def add(self, rec: RolloutRecord, oc: OutcomeClass) -> None:
        self.attempts += 1
        self.grounding[oc.grounding] += 1
        self.success[oc.success] += 1
        self.executed[rec.succeeded_task or "none"] += 1
        self.contacts["none" if rec.first_contact_object is None else str(rec.first_contact_object)] += 1

    def rate(self, key) -> float:
        return (self.grounding[key] if isinstance(key, Grounding) else self.success[key]) / max(self.attempts, 1)


RATE_FIELDS = (
    ("faithful_grounding", Grounding.Faithful),
    ("biased_grounding", Grounding.Biased),
    ("other_grounding", Grounding.Other),
    ("faithful_success", Success.Faithful),
    ("biased_success", Success.Biased),
)


@dataclass
class SuiteMetrics:
    wiring: str
    omega: float
    mode: str
    seed: int
    tallies: list[TaskTally]

    def select(self, suite: Optional[str] = None, in_domain: bool = False) -> list[TaskTally]:
        return [t for t in self.tallies if t.in_domain == in_domain and (suite is None or t.suite == suite)]

    @property
    def suites(self) -> list[str]:
        return list(dict.fromkeys(t.suite for t in self.tallies))

    def pooled(self, suite: Optional[str] = None, in_domain: bool = False) -> dict:
        ts = self.select(suite, in_domain)
        n = sum(t.attempts for t in ts)
        out = {"attempts": n}
        for name, key in RATE_FIELDS:
            c = sum((t.grounding if isinstance(key, Grounding) else t.success)[key] for t in ts)
            out[name] = c / n if n else float("nan")
        out["fail_count"] = sum(t.grounding[Grounding.Fail] for t in ts)
        return out

    def rates(self, in_domain: bool = False) -> dict:
        """Per-suite pooled rates plus their unweighted mean over suites."""
        per = {s: self.pooled(s, in_domain) for s in self.suites if self.select(s, in_domain)}
        avg = {name: float(np.mean([p[name] for p in per.values()])) for name, _ in RATE_FIELDS} if per else {}
        avg["fail_count"] = sum(p["fail_count"] for p in per.values())
        per["Average"] = avg
        return per

    # convenience accessors for the headline counterfactual rates
    @property
    def faithful_grounding_rate(self) -> float:
        return self.rates()["Average"]["faithful_grounding"]

    @property
    def biased_grounding_rate(self) -> float:
        return self.rates()["Average"]["biased_grounding"]

    @property
    def faithful_success_rate(self) -> float:
        return self.rates()["Average"]["faithful_success"]

    @property
    def biased_success_rate(self) -> float:
        return self.rates()["Average"]["biased_success"]

    @property
    def fail_count(self) -> int:
        return self.rates()["Average"]["fail_count"]


def _task_job(args):
    s, task, cfg, trials, base_seed, mode, sample = args
    seeds = [trial_seed(base_seed, task.id, k) for k in range(trials)]
    sel = [Sample(derive_seed(base_seed, "select", task.id, k)) for k in range(trials)] if sample else ARGMAX
    recs = rollout_batch(s, task, seeds, cfg, mode, sel)
    tally = TaskTally(s.kind.value, s.id, task.id, task is s.in_domain)
    for r in recs:
        tally.add(r, classify_outcome(r, s, task))
    return tally


def run_suite(
    sets: Sequence[SceneTaskSet],
    cfg: GuidanceConfig,
    trials_per_task: int = 50,
    base_seed: int = 0,
    mode: AblationMode = AblationMode.VisionAndLanguage,
    selection: str = ARGMAX,
    jobs: int = 1,
) -> SuiteMetrics:
    """Evaluate every task of every set; counterfactual and in-domain tallies kept apart."""
    if trials_per_task < 1:
        raise ValueError("trials_per_task must be >= 1")
    cfg.validate()
    mode = AblationMode(mode)
    work = [(s, t, cfg, trials_per_task, base_seed, mode, selection != ARGMAX) for s in sets for t in s.tasks]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            tallies = list(ex.map(_task_job, work))
    else:
        tallies = [_task_job(w) for w in work]
    return SuiteMetrics(cfg.wiring.value, float(cfg.omega), mode.value, base_seed, tallies)


def guidance_sweep(
    sets: Sequence[SceneTaskSet],
    cfg: GuidanceConfig,
    omega_grid: Sequence[float],
    trials: int = 50,
    seed: int = 0,
    mode: AblationMode = AblationMode.VisionAndLanguage,
    jobs: int = 1,
) -> list[tuple[float, SuiteMetrics]]:
    if not len(omega_grid):
        raise ValueError("omega grid is empty")
    return [(float(w), run_suite(sets, replace(cfg, omega=float(w)), trials, seed, mode, jobs=jobs)) for w in omega_grid]


# ---------------------------------------------------------------------------
# Grasp heatmaps
# ---------------------------------------------------------------------------


@dataclass
class HeatmapGrid:
    counts: np.ndarray  # (height, width) ints
    task_id: str
    variant: str  # "trained" | "counterfactual" | "empty"
    trials: int

    def modal_cell(self) -> Optional[tuple[int, int]]:
        if self.counts.sum() == 0:
            return None
        r, c = np.unravel_index(int(np.argmax(self.counts)), self.counts.shape)
        return int(r), int(c)


def bin_first_grasps(records: Iterable[RolloutRecord], width: int, height: int) -> np.ndarray:
    grid = np.zeros((height, width), dtype=np.int64)
    for r in records:
        if r.first_grasp_cell is not None:
            grid[r.first_grasp_cell] += 1
    return grid


def heatmap_scene_seed(seed: int, s: SceneTaskSet) -> int:
    return derive_seed(seed, "heatmap", s.id) % 2**31


def grasp_heatmap(
    sets: Sequence[SceneTaskSet],
    cfg: GuidanceConfig,
    variant: str,
    trials: int = 50,
    seed: int = 0,
) -> list[HeatmapGrid]:
    """First-grasp cells over sampled rollouts on one fixed layout per set.

    ``variant`` picks the instruction: the in-domain one, each counterfactual,
    or the empty instruction.
    """
    if variant not in ("trained", "counterfactual", "empty"):
        raise ValueError(f"unknown heatmap variant {variant!r}")
    out = []
    for s in sets:
        if s.in_domain is None:
            raise ValueError(f"{s.id} has no in-domain task")
        if variant == "counterfactual":
            jobs = [(t, None) for t in s.counterfactuals]
        else:
            jobs = [(s.in_domain, () if variant == "empty" else None)]
        sd = heatmap_scene_seed(seed, s)
        for task, instr in jobs:
            sel = [Sample(derive_seed(seed, "heatmap-select", task.id, variant, k)) for k in range(trials)]
            recs = rollout_batch(s, task, [sd] * trials, cfg, AblationMode.VisionAndLanguage, sel, instr)
            grid = bin_first_grasps(recs, s.layout.width, s.layout.height)
            out.append(HeatmapGrid(grid, task.id, variant, trials))
    return out


# ---------------------------------------------------------------------------
# CF-Focused comparison
# ---------------------------------------------------------------------------


@dataclass
class FocusedComparison:
    original: SuiteMetrics
    focused: SuiteMetrics
    deltas: list[dict]

    @property
    def mean_faithful_grounding_delta(self) -> float:
        return float(np.mean([d["faithful_grounding"] for d in self.deltas]))


def compare_cf_focused(
    sets: Sequence[SceneTaskSet],
    cfg: GuidanceConfig,
    trials: int = 50,
    seed: int = 0,
    jobs: int = 1,
) -> FocusedComparison:
    """Same counterfactual tasks and trial seeds, with and without the attractor."""
    focused = [apply_cf_focused(s) for s in sets]
    orig = run_suite(sets, cfg, trials, seed, jobs=jobs)
    foc = run_suite(focused, cfg, trials, seed, jobs=jobs)
    deltas = []
    for s, f in zip(sets, focused):
        a = _pool(orig.select(), s.id)
        b = _pool(foc.select(), f.id)
        deltas.append({"set_id": s.id, **{k: b[k] - a[k] for k in ("faithful_grounding", "faithful_success", "biased_grounding")}})
    return FocusedComparison(orig, foc, deltas)


def _pool(tallies, set_id):
    ts = [t for t in tallies if t.set_id == set_id]
    n = sum(t.attempts for t in ts)
    return {name: sum((t.grounding if isinstance(k, Grounding) else t.success)[k] for t in ts) / n for name, k in RATE_FIELDS}


# ---------------------------------------------------------------------------
# CSV / SVG output
# ---------------------------------------------------------------------------

METRICS_COLUMNS = (
    "suite", "wiring", "omega", "mode", "seed", "task_id",
    "faithful_grounding", "biased_grounding", "other_grounding",
    "faithful_success", "biased_success", "fail",
)
BREAKDOWN_COLUMNS = (
    "suite", "wiring", "omega", "mode", "seed", "set_id", "instructed_task",
    "metric", "executed", "role", "successes", "attempts",
)


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_rows(m: SuiteMetrics) -> list[dict]:
    """One row per task, then pooled rows per suite (task_id ``*cf`` / ``*in``)."""
    rows = []
    prov = {"wiring": m.wiring, "omega": _fmt(m.omega), "mode": m.mode, "seed": m.seed}
    for t in m.tallies:
        row = {"suite": t.suite, **prov, "task_id": t.task_id}
        for name, key in RATE_FIELDS:
            row[name] = _fmt(t.rate(key))
        row["fail"] = t.grounding[Grounding.Fail]
        rows.append(row)
    for suite in m.suites:
        for in_domain, tag in ((False, "*cf"), (True, "*in")):
            if not m.select(suite, in_domain):
                continue
            p = m.pooled(suite, in_domain)
            row = {"suite": suite, **prov, "task_id": tag}
            for name, _ in RATE_FIELDS:
                row[name] = _fmt(p[name])
            row["fail"] = p["fail_count"]
            rows.append(row)
    return rows


def breakdown_rows(m: SuiteMetrics, sets: Sequence[SceneTaskSet]) -> list[dict]:
    """Table-VII style entries: successes / attempts per instructed x executed."""
    by_id = {s.id: s for s in sets}
    rows = []
    prov = {"wiring": m.wiring, "omega": _fmt(m.omega), "mode": m.mode, "seed": m.seed}
    for t in m.tallies:
        s = by_id[t.set_id]
        instructed = s.task(t.task_id)
        ind = s.in_domain
        for obj in sorted(t.contacts):
            if obj == "none":
                role = "fail"
            elif int(obj) == instructed.target_object_id:
                role = "faithful"
            elif ind is not None and int(obj) == ind.target_object_id:
                role = "biased"
            else:
                role = "other"
            rows.append({"suite": t.suite, **prov, "set_id": t.set_id, "instructed_task": t.task_id,
                         "metric": "grounding", "executed": obj, "role": role,
                         "successes": t.contacts[obj], "attempts": t.attempts})
        for ex in sorted(t.executed):
            if ex == "none":
                role = "fail"
            elif ex == instructed.id:
                role = "faithful"
            elif ind is not None and ex == ind.id:
                role = "biased"
            else:
                role = "other"
            rows.append({"suite": t.suite, **prov, "set_id": t.set_id, "instructed_task": t.task_id,
                         "metric": "success", "executed": ex, "role": role,
                         "successes": t.executed[ex], "attempts": t.attempts})
    return rows


def rates_from_breakdown(rows: Iterable[dict], in_domain: bool = False) -> dict:
    """Recompute per-suite pooled rates and their mean from breakdown rows."""
    attempts: dict = {}
    counts: Counter = Counter()
    for r in rows:
        is_in = str(r["instructed_task"]).endswith("/in")
        if is_in != in_domain:
            continue
        key = (r["suite"], r["instructed_task"])
        attempts[key] = int(r["attempts"])
        counts[(r["suite"], r["metric"], r["role"])] += int(r["successes"])
    suites = list(dict.fromkeys(k[0] for k in attempts))
    out = {}
    for s in suites:
        n = sum(v for k, v in attempts.items() if k[0] == s)
        out[s] = {
            "faithful_grounding": counts[(s, "grounding", "faithful")] / n,
            "biased_grounding": counts[(s, "grounding", "biased")] / n,
            "other_grounding": counts[(s, "grounding", "other")] / n,
            "faithful_success": counts[(s, "success", "faithful")] / n,
            "biased_success": counts[(s, "success", "biased")] / n,
        }
    if out:
        out["Average"] = {k: float(np.mean([v[k] for v in out.values()])) for k in next(iter(out.values()))}
    return out


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def heatmap_csv(h: HeatmapGrid) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in h.counts:
        w.writerow([int(x) for x in row])
    return buf.getvalue()


def heatmap_svg(h: HeatmapGrid, cell: int = 32, marks: Optional[dict] = None) -> str:
    """Grid of rectangles shaded by count; ``marks`` maps cells to labels."""
    rows, cols = h.counts.shape
    peak = max(int(h.counts.max()), 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" height="{rows * cell + 20}" '
        f'viewBox="0 0 {cols * cell} {rows * cell + 20}">',
        f'<text x="2" y="14" font-family="monospace" font-size="11">{h.task_id} [{h.variant}] n={h.trials}</text>',
    ]
    for r in range(rows):
        for c in range(cols):
            v = int(h.counts[r, c])
            shade = 255 - int(round(215 * v / peak))
            parts.append(
                f'<rect x="{c * cell}" y="{r * cell + 20}" width="{cell}" height="{cell}" '
                f'fill="rgb(255,{shade},{shade})" stroke="#999" stroke-width="0.5"><title>{v}</title></rect>'
            )
            if v:
                parts.append(
                    f'<text x="{c * cell + cell // 2}" y="{r * cell + 20 + cell // 2 + 4}" '
                    f'font-family="monospace" font-size="10" text-anchor="middle">{v}</text>'
                )
    for (r, c), label in (marks or {}).items():
        parts.append(
            f'<rect x="{c * cell + 2}" y="{r * cell + 22}" width="{cell - 4}" height="{cell - 4}" '
            f'fill="none" stroke="#225" stroke-width="1.5"><title>{label}</title></rect>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
