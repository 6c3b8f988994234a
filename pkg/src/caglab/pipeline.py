"""Config-driven experiment pipeline: gen, collect, train, eval, sweep, report.

Every run is laid out under ``<output_dir>/seed-<s>/`` for each seed in the
config, plus a top-level ``report/`` directory. ``manifest.json`` in each seed
directory records the sha256 of every artifact together with the hashes of
the inputs it was built from, so a step refuses to consume inputs that were
rebuilt (or edited) after their own consumers' upstream changed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluation as ev
from .dataset import collect_demos, load_dataset, replay_audit, save_dataset
from .guidance import GuidanceConfig, MixingSpace, Wiring
from .policy import TrainConfig, load_params, save_params, train
from .suites import (
    DEFAULT_HELD_OUT,
    DEFAULT_SCENES,
    BiasProfile,
    SuiteKind,
    feasibility_check,
    load_sets,
    make_benchmark,
    save_sets,
    suite_path,
)
from .sim import PlacementInfeasible

log = logging.getLogger(__name__)

BRANCHES = ("cond", "va", "dropout")
DEFAULT_GRID = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0)


class ConfigError(ValueError):
    pass


class MissingInputs(FileNotFoundError):
    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("missing input files:\n  " + "\n  ".join(self.paths))


class StaleInput(OSError):
    pass


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def _train_defaults(dropout: float = 0.0) -> dict:
    t = TrainConfig()
    return {"learning_rate": t.learning_rate, "epochs": t.epochs, "batch_size": t.batch_size,
            "hidden": t.hidden, "language_dropout_prob": dropout}


@dataclass
class ExperimentConfig:
    base_seed: int = 0
    n_seeds: int = 5
    suites: dict = field(default_factory=lambda: dict(DEFAULT_SCENES))
    held_out_classes: list = field(default_factory=lambda: list(DEFAULT_HELD_OUT))
    bias_profile: dict = field(default_factory=lambda: {"demos_in_domain": 200, "demos_under_observed": 1, "demos_ood": 0})
    train: dict = field(default_factory=lambda: {"cond": _train_defaults(), "va": _train_defaults(),
                                                 "dropout": _train_defaults(0.5)})
    guidance: dict = field(default_factory=lambda: {"omega": 1.5, "space": "LogitSpace"})
    wirings: list = field(default_factory=lambda: [w.value for w in Wiring])
    ablation_modes: list = field(default_factory=lambda: [m.value for m in ev.AblationMode])
    sweep: dict = field(default_factory=lambda: {"wiring": "VA", "omega_grid": list(DEFAULT_GRID)})
    trials: int = 50
    heatmap_trials: int = 50
    output_dir: str = "runs/default"

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.n_seeds)]

    def bias(self) -> BiasProfile:
        return BiasProfile(**self.bias_profile)

    def train_config(self, branch: str, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.train[branch])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _reject_unknown(d: dict, allowed, where: str) -> None:
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{extra[0]}")


def _need_int(v, name, lo=0):
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(f"{name} must be an integer >= {lo}, got {v!r}")
    return v


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    base = ExperimentConfig()
    _reject_unknown(d, base.to_dict(), "")
    merged = base.to_dict()
    for k, v in d.items():
        if k == "train":
            if not isinstance(v, dict):
                raise ConfigError("train must be an object")
            _reject_unknown(v, BRANCHES, "train")
            for b, tc in v.items():
                if not isinstance(tc, dict):
                    raise ConfigError(f"train.{b} must be an object")
                _reject_unknown(tc, _train_defaults(), f"train.{b}")
                merged["train"][b].update(tc)
        elif k in ("guidance", "sweep", "bias_profile"):
            if not isinstance(v, dict):
                raise ConfigError(f"{k} must be an object")
            _reject_unknown(v, merged[k], k)
            merged[k].update(v)
        else:
            merged[k] = v
    cfg = ExperimentConfig(**merged)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    _need_int(cfg.base_seed, "base_seed")
    _need_int(cfg.n_seeds, "n_seeds", 1)
    _need_int(cfg.trials, "trials", 1)
    _need_int(cfg.heatmap_trials, "heatmap_trials", 0)
    if not isinstance(cfg.suites, dict) or not cfg.suites:
        raise ConfigError("suites must be a non-empty object of kind -> scene count")
    for kind, n in cfg.suites.items():
        if kind not in SuiteKind.__members__:
            raise ConfigError(f"suites.{kind}: unknown suite kind (expected one of {', '.join(SuiteKind.__members__)})")
        _need_int(n, f"suites.{kind}")
    for c in cfg.held_out_classes:
        _need_int(c, "held_out_classes[]")
    for k, n in cfg.bias_profile.items():
        _need_int(n, f"bias_profile.{k}")
    if cfg.bias_profile["demos_ood"] != 0:
        raise ConfigError("bias_profile.demos_ood must be 0")
    for b in BRANCHES:
        try:
            TrainConfig(**cfg.train[b])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"train.{b}: {e}") from e
    try:
        MixingSpace(cfg.guidance["space"])
    except ValueError:
        raise ConfigError(f"guidance.space: unknown mixing space {cfg.guidance['space']!r}") from None
    if not isinstance(cfg.guidance["omega"], (int, float)) or cfg.guidance["omega"] < 0:
        raise ConfigError("guidance.omega must be a non-negative number")
    for w in list(cfg.wirings) + [cfg.sweep["wiring"]]:
        if w not in Wiring.__members__:
            raise ConfigError(f"wirings: unknown wiring {w!r}")
    for m in cfg.ablation_modes:
        if m not in ev.AblationMode.__members__:
            raise ConfigError(f"ablation_modes: unknown mode {m!r}")
    grid = cfg.sweep["omega_grid"]
    if not grid or any(not isinstance(w, (int, float)) or w < 0 for w in grid):
        raise ConfigError("sweep.omega_grid must be a non-empty list of non-negative numbers")


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return config_from_dict(d)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    """``{artifact: {"sha256": ..., "inputs": {path: sha256}}}`` keyed by run-relative path."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        self.entries = json.loads(self.path.read_text()) if self.path.exists() else {}

    def rel(self, p) -> str:
        return Path(p).relative_to(self.root).as_posix()

    def check_inputs(self, paths) -> None:
        """Inputs must exist, match their recorded hash, and not be stale themselves."""
        missing = [p for p in paths if not Path(p).exists()]
        if missing:
            raise MissingInputs(missing)
        for p in paths:
            key = self.rel(p)
            entry = self.entries.get(key)
            if entry is None:
                raise StaleInput(f"{key} is not recorded in {self.path}; rerun the step that makes it")
            if sha256_file(p) != entry["sha256"]:
                raise StaleInput(f"{key} changed after it was recorded; rerun the step that makes it")
            for up, h in entry["inputs"].items():
                upp = self.root / up
                if not upp.exists() or sha256_file(upp) != h:
                    raise StaleInput(f"{key} was built from an older {up}; rerun the step that makes {key}")

    def record(self, outputs, inputs) -> None:
        ins = {self.rel(p): sha256_file(p) for p in sorted(inputs, key=str)}
        for p in outputs:
            self.entries[self.rel(p)] = {"sha256": sha256_file(p), "inputs": ins}
        self.save()

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.entries, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


class RunPaths:
    def __init__(self, out: Path, seed: int):
        self.root = Path(out) / f"seed-{seed}"
        self.data = self.root / "data" / "demos.ndjson"
        self.audit = self.root / "data" / "audit.json"

    def suites(self, m: Manifest) -> list[Path]:
        return sorted(self.root / k for k in m.entries if k.startswith("suites/"))

    def params(self, branch: str) -> Path:
        return self.root / "params" / f"{branch}.params"

    def loss_csv(self, branch: str) -> Path:
        return self.root / "params" / f"{branch}_loss.csv"

    def metrics(self, wiring: str, mode: str) -> Path:
        return self.root / "eval" / f"metrics_{wiring}_{mode}.csv"

    def breakdown(self, wiring: str, mode: str) -> Path:
        return self.root / "eval" / f"breakdown_{wiring}_{mode}.csv"

    @property
    def sweep_metrics(self) -> Path:
        return self.root / "sweep" / "metrics.csv"

    @property
    def sweep_breakdown(self) -> Path:
        return self.root / "sweep" / "breakdown.csv"

    @property
    def focused(self) -> Path:
        return self.root / "eval" / "cf_focused.csv"

    @property
    def heatmaps(self) -> Path:
        return self.root / "heatmaps"


def _seeds(cfg: ExperimentConfig) -> list[int]:
    return cfg.seeds


def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, jobs: int = 1) -> list[Path]:
    written = []
    for seed in _seeds(cfg):
        rp = RunPaths(_out(cfg), seed)
        m = Manifest(rp.root)
        sets = make_benchmark(cfg.suites, seed, tuple(cfg.held_out_classes))
        for s in sets:
            if not feasibility_check(s, seed=seed):
                raise PlacementInfeasible(f"{s.id}: scripted expert cannot finish every task")
        old = [rp.root / k for k in m.entries if k.startswith("suites/")]
        paths = save_sets(rp.root, sets)
        for p in old:
            if p not in paths and p.exists():
                p.unlink()
        m.entries = {k: v for k, v in m.entries.items() if not k.startswith("suites/")}
        m.record(paths, [])
        written.extend(paths)
        log.info("seed %d: %d scene-task sets", seed, len(sets))
    return written


def _load_sets_checked(rp: RunPaths, m: Manifest):
    paths = rp.suites(m)
    if not paths:
        raise MissingInputs([rp.root / "suites"])
    m.check_inputs(paths)
    return load_sets(rp.root), paths


def cmd_collect(cfg: ExperimentConfig, jobs: int = 1) -> list[Path]:
    written = []
    for seed in _seeds(cfg):
        rp = RunPaths(_out(cfg), seed)
        m = Manifest(rp.root)
        sets, inputs = _load_sets_checked(rp, m)
        ds = collect_demos(sets, cfg.bias(), seed, jobs)
        rp.data.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, rp.data)
        audit = replay_audit(ds, sets)
        audit["failures"] = [list(f) for f in audit["failures"]]
        audit["per_task"] = dict(sorted(ds.counts.items()))
        rp.audit.write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
        m.record([rp.data, rp.audit], inputs)
        written += [rp.data, rp.audit]
        log.info("seed %d: %d demonstrations, replay %.3f", seed, len(ds), audit["success_rate"])
    return written


def cmd_train(cfg: ExperimentConfig, branches=BRANCHES, jobs: int = 1) -> list[Path]:
    written = []
    for seed in _seeds(cfg):
        rp = RunPaths(_out(cfg), seed)
        m = Manifest(rp.root)
        m.check_inputs([rp.data])
        ds = load_dataset(rp.data)
        for b in branches:
            hist = []
            params = train(ds, cfg.train_config(b, seed), conditioned=(b != "va"), history=hist)
            rp.params(b).parent.mkdir(parents=True, exist_ok=True)
            save_params(params, rp.params(b))
            ev.write_csv(rp.loss_csv(b), ("epoch", "loss"), [{"epoch": e, "loss": repr(float(l))} for e, l in hist])
            m.record([rp.params(b), rp.loss_csv(b)], [rp.data])
            written += [rp.params(b), rp.loss_csv(b)]
            log.info("seed %d: trained %s, final loss %.5f", seed, b, hist[-1][1])
    return written


def _guidance(cfg: ExperimentConfig, rp: RunPaths, m: Manifest, wiring: str, omega: Optional[float] = None):
    w = Wiring(wiring)
    need = {Wiring.Baseline: ["cond"], Wiring.TF: ["cond"], Wiring.VA: ["cond", "va"], Wiring.DropoutShared: ["dropout"]}[w]
    files = [rp.params(b) for b in need]
    m.check_inputs(files)
    loaded = {b: load_params(rp.params(b)) for b in need}
    cond = loaded["dropout"] if w is Wiring.DropoutShared else loaded["cond"]
    gc = GuidanceConfig(
        omega=float(cfg.guidance["omega"] if omega is None else omega),
        space=cfg.guidance["space"],
        wiring=w,
        cond_params=cond,
        uncond_params=loaded.get("va"),
    )
    return gc.validate(), files


def eval_plan(cfg: ExperimentConfig, wirings=None, modes=None) -> list[tuple[str, str]]:
    """(wiring, mode) pairs: every wiring with vision+language, ablations on Baseline."""
    if wirings is not None or modes is not None:
        ws = wirings or cfg.wirings
        ms = modes or [ev.AblationMode.VisionAndLanguage.value]
        return [(w, mo) for w in ws for mo in ms]
    plan = [(w, ev.AblationMode.VisionAndLanguage.value) for w in cfg.wirings]
    plan += [(Wiring.Baseline.value, mo) for mo in cfg.ablation_modes if mo != ev.AblationMode.VisionAndLanguage.value]
    return plan


def cmd_eval(cfg: ExperimentConfig, wirings=None, modes=None, studies: bool = True, jobs: int = 1) -> list[Path]:
    written = []
    for seed in _seeds(cfg):
        rp = RunPaths(_out(cfg), seed)
        m = Manifest(rp.root)
        sets, set_files = _load_sets_checked(rp, m)
        for wiring, mode in eval_plan(cfg, wirings, modes):
            gc, pfiles = _guidance(cfg, rp, m, wiring)
            met = ev.run_suite(sets, gc, cfg.trials, seed, mode, jobs=jobs)
            outs = [rp.metrics(wiring, mode), rp.breakdown(wiring, mode)]
            outs[0].parent.mkdir(parents=True, exist_ok=True)
            ev.write_csv(outs[0], ev.METRICS_COLUMNS, ev.metrics_rows(met))
            ev.write_csv(outs[1], ev.BREAKDOWN_COLUMNS, ev.breakdown_rows(met, sets))
            m.record(outs, set_files + pfiles)
            written += outs
            log.info("seed %d: %s/%s faithful grounding %.3f", seed, wiring, mode, met.faithful_grounding_rate)
        if studies:
            written += _studies(cfg, rp, m, sets, set_files, seed, jobs)
    return written


def _studies(cfg, rp, m, sets, set_files, seed, jobs) -> list[Path]:
    """Grasp heatmaps and the CF-Focused comparison, both on the Baseline policy."""
    gc, pfiles = _guidance(cfg, rp, m, Wiring.Baseline.value)
    written = []
    spatial = [s for s in sets if s.kind is SuiteKind.CFSpatial]
    if spatial:
        cmp_ = ev.compare_cf_focused(spatial, gc, cfg.trials, seed, jobs)
        rows = [{"seed": seed, "wiring": gc.wiring.value, "omega": repr(float(gc.omega)),
                 "mode": ev.AblationMode.VisionAndLanguage.value,
                 **{k: (repr(float(v)) if isinstance(v, float) else v) for k, v in d.items()}}
                for d in cmp_.deltas]
        for s, d in zip(spatial, rows):
            a = ev._pool(cmp_.original.select(), s.id)
            b = ev._pool(cmp_.focused.select(), s.id + "-focused")
            d["original_faithful_grounding"] = repr(a["faithful_grounding"])
            d["focused_faithful_grounding"] = repr(b["faithful_grounding"])
        cols = ("seed", "wiring", "omega", "mode", "set_id", "original_faithful_grounding",
                "focused_faithful_grounding", "faithful_grounding", "faithful_success", "biased_grounding")
        rp.focused.parent.mkdir(parents=True, exist_ok=True)
        ev.write_csv(rp.focused, cols, rows)
        m.record([rp.focused], set_files + pfiles)
        written.append(rp.focused)
    if cfg.heatmap_trials:
        hm_sets = [s for s in sets if s.in_domain is not None]
        rp.heatmaps.mkdir(parents=True, exist_ok=True)
        index = []
        for variant in ("trained", "counterfactual", "empty"):
            for h in ev.grasp_heatmap(hm_sets, gc, variant, cfg.heatmap_trials, seed):
                stem = h.task_id.replace("/", "_") + f"_{variant}"
                s = next(x for x in hm_sets if h.task_id.startswith(x.id + "/"))
                scene = s.build_scene(ev.heatmap_scene_seed(seed, s))
                tt = scene.obj(s.layout.training_task_object_id).position
                marks = {o.position: f"object {o.id}" + (" (training-task)" if o.position == tt else "")
                         for o in scene.objects}
                csv_p, svg_p = rp.heatmaps / f"{stem}.csv", rp.heatmaps / f"{stem}.svg"
                csv_p.write_text(ev.heatmap_csv(h))
                svg_p.write_text(ev.heatmap_svg(h, marks=marks))
                modal = h.modal_cell()
                index.append({"seed": seed, "wiring": gc.wiring.value, "omega": repr(float(gc.omega)),
                              "mode": ev.AblationMode.VisionAndLanguage.value, "task_id": h.task_id,
                              "variant": variant, "grasps": int(h.counts.sum()), "trials": h.trials,
                              "modal_row": "" if modal is None else modal[0],
                              "modal_col": "" if modal is None else modal[1],
                              "training_task_row": tt[0], "training_task_col": tt[1]})
                written += [csv_p, svg_p]
        idx_p = rp.heatmaps / "index.csv"
        ev.write_csv(idx_p, tuple(index[0]) if index else ("seed",), index)
        written.append(idx_p)
        m.record([p for p in written if p != rp.focused], set_files + pfiles)
    return written


def cmd_sweep(cfg: ExperimentConfig, jobs: int = 1) -> list[Path]:
    written = []
    for seed in _seeds(cfg):
        rp = RunPaths(_out(cfg), seed)
        m = Manifest(rp.root)
        sets, set_files = _load_sets_checked(rp, m)
        gc, pfiles = _guidance(cfg, rp, m, cfg.sweep["wiring"])
        rows, brows = [], []
        for _, met in ev.guidance_sweep(sets, gc, cfg.sweep["omega_grid"], cfg.trials, seed, jobs=jobs):
            rows += ev.metrics_rows(met)
            brows += ev.breakdown_rows(met, sets)
        rp.sweep_metrics.parent.mkdir(parents=True, exist_ok=True)
        ev.write_csv(rp.sweep_metrics, ev.METRICS_COLUMNS, rows)
        ev.write_csv(rp.sweep_breakdown, ev.BREAKDOWN_COLUMNS, brows)
        m.record([rp.sweep_metrics, rp.sweep_breakdown], set_files + pfiles)
        written += [rp.sweep_metrics, rp.sweep_breakdown]
    return written


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def report_inputs(cfg: ExperimentConfig) -> list[Path]:
    files = []
    for seed in _seeds(cfg):
        rp = RunPaths(_out(cfg), seed)
        for w, mo in eval_plan(cfg):
            files.append(rp.breakdown(w, mo))
        files += [rp.sweep_breakdown, rp.focused]
    return files


def _mean(xs):
    xs = [x for x in xs if x == x]
    return float(np.mean(xs)) if xs else float("nan")


def collect_results(cfg: ExperimentConfig) -> dict:
    """Seed-averaged rates recomputed from the breakdown CSVs."""
    missing = [p for p in report_inputs(cfg) if not p.exists()]
    if missing:
        raise MissingInputs(missing)
    res: dict = {"seeds": _seeds(cfg), "eval": {}, "sweep": {}, "focused": []}
    for seed in _seeds(cfg):
        rp = RunPaths(_out(cfg), seed)
        Manifest(rp.root).check_inputs(
            [rp.breakdown(w, mo) for w, mo in eval_plan(cfg)] + [rp.sweep_breakdown, rp.focused]
        )
        for w, mo in eval_plan(cfg):
            rows = ev.read_csv(rp.breakdown(w, mo))
            res["eval"].setdefault((w, mo), []).append(
                {"cf": ev.rates_from_breakdown(rows), "in": ev.rates_from_breakdown(rows, in_domain=True)}
            )
        sweep_rows = ev.read_csv(rp.sweep_breakdown)
        for om in sorted({float(r["omega"]) for r in sweep_rows}):
            sel = [r for r in sweep_rows if float(r["omega"]) == om]
            res["sweep"].setdefault(om, []).append(
                {"cf": ev.rates_from_breakdown(sel), "in": ev.rates_from_breakdown(sel, in_domain=True)}
            )
        res["focused"] += ev.read_csv(rp.focused)
    return res


def seed_mean(per_seed: list, part: str, suite: str, key: str) -> float:
    return _mean([r[part].get(suite, {}).get(key, float("nan")) for r in per_seed])


def render_summary(cfg: ExperimentConfig, res: dict) -> str:
    suites = [k for k in SuiteKind.__members__ if cfg.suites.get(k)] + ["Average"]
    vl = ev.AblationMode.VisionAndLanguage.value
    wirings = [w for w, mo in res["eval"] if mo == vl]
    pct = lambda x: "n/a" if x != x else f"{100 * x:.1f}"
    lines = [
        "# Counterfactual evaluation summary",
        "",
        f"Seeds: {', '.join(map(str, res['seeds']))}. Trials per task: {cfg.trials}. "
        f"Guidance scale: {cfg.guidance['omega']} ({cfg.guidance['space']}). "
        "Rates are percentages, averaged over seeds; suite rows pool the counterfactual tasks of a suite "
        "and Average is their unweighted mean.",
        "",
        "## Counterfactual tasks by wiring",
        "",
    ]
    metrics = (("faithful_grounding", "Grounding faithful (up)"), ("biased_grounding", "Grounding biased (down)"),
               ("faithful_success", "Success faithful (up)"), ("biased_success", "Success biased (down)"))
    head = "| Suite | Wiring | " + " | ".join(h for _, h in metrics) + " |"
    lines += [head, "|" + "---|" * (2 + len(metrics))]
    for s in suites:
        for w in wirings:
            per = res["eval"][(w, vl)]
            lines.append(f"| {s} | {w} | " + " | ".join(pct(seed_mean(per, 'cf', s, k)) for k, _ in metrics) + " |")
    lines += ["", "## In-domain tasks by wiring (success)", "", "| Wiring | " + " | ".join(suites) + " |",
              "|" + "---|" * (1 + len(suites))]
    for w in wirings:
        per = res["eval"][(w, vl)]
        lines.append(f"| {w} | " + " | ".join(pct(seed_mean(per, 'in', s, 'faithful_success')) for s in suites) + " |")
    modes = [mo for w, mo in res["eval"] if w == Wiring.Baseline.value]
    if modes:
        lines += ["", "## Input ablation, Baseline policy, in-domain tasks", "",
                  "| Mode | Success | Grounding |", "|---|---|---|"]
        for mo in modes:
            per = res["eval"][(Wiring.Baseline.value, mo)]
            lines.append(f"| {mo} | {pct(seed_mean(per, 'in', 'Average', 'faithful_success'))} | "
                         f"{pct(seed_mean(per, 'in', 'Average', 'faithful_grounding'))} |")
    lines += ["", f"## Guidance sweep ({cfg.sweep['wiring']} wiring, counterfactual tasks)", "",
              "| omega | Grounding faithful | Grounding biased | Success faithful | In-domain success |",
              "|---|---|---|---|---|"]
    for om, per in sorted(res["sweep"].items()):
        lines.append(f"| {om:g} | {pct(seed_mean(per, 'cf', 'Average', 'faithful_grounding'))} | "
                     f"{pct(seed_mean(per, 'cf', 'Average', 'biased_grounding'))} | "
                     f"{pct(seed_mean(per, 'cf', 'Average', 'faithful_success'))} | "
                     f"{pct(seed_mean(per, 'in', 'Average', 'faithful_success'))} |")
    if res["focused"]:
        o = _mean([float(r["original_faithful_grounding"]) for r in res["focused"]])
        f = _mean([float(r["focused_faithful_grounding"]) for r in res["focused"]])
        lines += ["", "## Attractor removed (CFSpatial sets, Baseline policy)", "",
                  "| Variant | Faithful grounding |", "|---|---|",
                  f"| original | {pct(o)} |", f"| attractor removed | {pct(f)} |", f"| delta | {pct(f - o)} |"]
    return "\n".join(lines) + "\n"


def cmd_report(cfg: ExperimentConfig, jobs: int = 1) -> Path:
    res = collect_results(cfg)
    out = _out(cfg) / "report"
    out.mkdir(parents=True, exist_ok=True)
    p = out / "summary.md"
    p.write_text(render_summary(cfg, res))
    return p


def run_all(cfg: ExperimentConfig, jobs: int = 1) -> Path:
    cmd_gen(cfg, jobs)
    cmd_collect(cfg, jobs)
    cmd_train(cfg, jobs=jobs)
    cmd_eval(cfg, jobs=jobs)
    cmd_sweep(cfg, jobs)
    return cmd_report(cfg, jobs)
