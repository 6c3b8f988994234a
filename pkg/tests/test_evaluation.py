import numpy as np
import pytest

from caglab.evaluation import (
    AblationMode,
    Grounding,
    OutcomeClass,
    RolloutRecord,
    Success,
    TaskTally,
    breakdown_rows,
    classify_outcome,
    compare_cf_focused,
    grasp_heatmap,
    guidance_sweep,
    heatmap_csv,
    heatmap_svg,
    metrics_rows,
    rates_from_breakdown,
    read_csv,
    rollout,
    run_suite,
    trial_seed,
    write_csv,
    BREAKDOWN_COLUMNS,
    METRICS_COLUMNS,
)
from caglab.guidance import ConfigInconsistency, GuidanceConfig, Wiring
from caglab.policy import encode_instruction, forward_logits, init_params
from caglab.sim import Action, ObjectSpec, PlaceOn, SceneLayout, observation_indices, observation_size, step
from caglab.suites import Observedness, SceneTaskSet, SuiteKind, TaskSpec, make_suite


def pick(sets, kind, k=0):
    return [s for s in sets if s.kind is kind][k]


def baseline(t):
    return GuidanceConfig(1.0, wiring=Wiring.Baseline, cond_params=t.cond)


def va(t, omega):
    return GuidanceConfig(omega, wiring=Wiring.VA, cond_params=t.cond, uncond_params=t.va)


def tf(t, omega):
    return GuidanceConfig(omega, wiring=Wiring.TF, cond_params=t.cond)


def strip(rows):
    return [{k: v for k, v in r.items() if k not in ("wiring", "omega")} for r in rows]


# -- rollouts ---------------------------------------------------------------


def test_baseline_is_conditional_policy_alone(trained):
    s = pick(trained.sets, SuiteKind.CFObject)
    task = s.counterfactuals[0]
    rec = rollout(s, task, 17, baseline(trained))
    scene, instr, acts = s.build_scene(17), encode_instruction(task.instruction), []
    d = observation_size(9, 9)
    for _ in range(rec.steps_used):
        obs = np.zeros(d)
        obs[list(observation_indices(scene))] = 1
        a = int(np.argmax(forward_logits(trained.cond, obs, instr)))
        step(scene, a)
        acts.append(a)
    assert acts == rec.actions


def test_tf_at_one_matches_baseline_step_for_step(trained):
    for s in trained.sets[::3]:
        for task in s.tasks:
            for k in range(3):
                sd = trial_seed(0, task.id, k)
                a = rollout(s, task, sd, baseline(trained))
                b = rollout(s, task, sd, tf(trained, 1.0))
                assert a.actions == b.actions and a.events == b.events


def test_va_at_zero_is_vision_only_policy(trained):
    s = pick(trained.sets, SuiteKind.CFSpatial)
    alone = GuidanceConfig(1.0, cond_params=trained.va)
    for task in s.tasks:
        assert rollout(s, task, 3, va(trained, 0.0)).actions == rollout(s, task, 3, alone).actions


def test_vision_only_equals_empty_instruction(trained):
    s = pick(trained.sets, SuiteKind.CFLong)
    task = s.counterfactuals[0]
    a = rollout(s, task, 5, baseline(trained), AblationMode.VisionOnly)
    b = rollout(s, task, 5, baseline(trained), instruction=())
    assert a.actions == b.actions


def test_language_only_ignores_scene(trained):
    s = pick(trained.sets, SuiteKind.CFObject)
    task = s.in_domain
    firsts = {rollout(s, task, sd, baseline(trained), "LanguageOnly").actions[0] for sd in range(5)}
    assert len(firsts) == 1


def test_rollout_record_invariants(trained):
    s = pick(trained.sets, SuiteKind.CFLong)
    for task in s.tasks:
        rec = rollout(s, task, 9, va(trained, 1.5))
        contacts = [e[1] for ev in rec.events for e in ev if e[0] == "contact"]
        assert rec.first_contact_object == (contacts[0] if contacts else None)
        assert len(rec.actions) == rec.steps_used <= task.horizon
        if rec.succeeded_task:
            scene = s.build_scene(9)
            for a in rec.actions:
                step(scene, a)
            from caglab.sim import check_success

            assert check_success(scene, s.task(rec.succeeded_task).success_predicate)


def test_invalid_config_raises(trained):
    s = trained.sets[0]
    with pytest.raises(ConfigInconsistency):
        rollout(s, s.in_domain, 0, GuidanceConfig(1.5, wiring=Wiring.VA, cond_params=trained.cond))


# -- classification ---------------------------------------------------------


def test_classify_examples():
    s = make_suite(SuiteKind.CFObject, 1, 0)[0]
    cf, ind = s.counterfactuals[0], s.in_domain
    other = next(o.id for o in s.layout.objects if o.id not in (cf.target_object_id, ind.target_object_id))

    def rec(fc, done):
        return RolloutRecord(cf.id, 0, 0, first_contact_object=fc, succeeded_task=done)

    assert classify_outcome(rec(cf.target_object_id, cf.id), s, cf) == OutcomeClass(Grounding.Faithful, Success.Faithful)
    assert classify_outcome(rec(ind.target_object_id, ind.id), s, cf) == OutcomeClass(Grounding.Biased, Success.Biased)
    assert classify_outcome(rec(None, None), s, cf) == OutcomeClass(Grounding.Fail, Success.No)
    assert classify_outcome(rec(other, None), s, cf) == OutcomeClass(Grounding.Other, Success.No)


def test_prefix_over_execution_is_biased():
    s = make_suite(SuiteKind.CFLong, 1, 0)[0]
    prefix = s.counterfactuals[1]
    r = RolloutRecord(prefix.id, 0, 0, first_contact_object=prefix.target_object_id, succeeded_task=s.in_domain.id)
    assert classify_outcome(r, s, prefix).success is Success.Biased


def test_counting_six_of_ten():
    s = make_suite(SuiteKind.CFObject, 1, 0)[0]
    cf = s.counterfactuals[0]
    t = TaskTally("CFObject", s.id, cf.id, False)
    for k in range(10):
        ok = k < 6
        r = RolloutRecord(cf.id, k, k, first_contact_object=cf.target_object_id, succeeded_task=cf.id if ok else None)
        t.add(r, classify_outcome(r, s, cf))
    assert t.rate(Success.Faithful) == 0.6 and t.rate(Grounding.Faithful) == 1.0


# -- suite metrics ----------------------------------------------------------


@pytest.fixture(scope="module")
def small_run(trained):
    sets = [pick(trained.sets, k) for k in SuiteKind]
    return sets, run_suite(sets, va(trained, 1.5), trials_per_task=6, base_seed=3)


def test_rates_in_unit_interval(small_run):
    _, m = small_run
    for in_domain in (False, True):
        for suite, r in m.rates(in_domain).items():
            assert all(0 <= r[k] <= 1 for k in r if k not in ("fail_count", "attempts"))
    assert len(m.select()) == 2 * len(m.select(in_domain=True))


def test_rates_recomputed_from_breakdown(small_run):
    sets, m = small_run
    rows = breakdown_rows(m, sets)
    for in_domain in (False, True):
        want, got = m.rates(in_domain), rates_from_breakdown(rows, in_domain)
        assert set(want) == set(got)
        for suite in want:
            for k in got[suite]:
                assert got[suite][k] == pytest.approx(want[suite][k], abs=1e-12)


def test_breakdown_attempts(small_run):
    sets, m = small_run
    sums = {}
    for r in breakdown_rows(m, sets):
        key = (r["instructed_task"], r["metric"])
        sums[key] = sums.get(key, 0) + r["successes"]
        assert r["attempts"] == 6
    assert set(sums.values()) == {6}


def test_run_suite_deterministic_and_parallel_safe(trained, small_run):
    sets, m = small_run
    again = run_suite(sets, va(trained, 1.5), trials_per_task=6, base_seed=3, jobs=2)
    assert metrics_rows(again) == metrics_rows(m)
    other = run_suite(sets, va(trained, 1.5), trials_per_task=6, base_seed=4)
    assert metrics_rows(other) != metrics_rows(m)


def test_trials_must_be_positive(trained):
    with pytest.raises(ValueError):
        run_suite(trained.sets[:1], baseline(trained), trials_per_task=0)


def test_csv_round_trip(tmp_path, small_run):
    sets, m = small_run
    write_csv(tmp_path / "m.csv", METRICS_COLUMNS, metrics_rows(m))
    rows = read_csv(tmp_path / "m.csv")
    assert list(rows[0]) == list(METRICS_COLUMNS)
    assert {r["task_id"] for r in rows} >= {"*cf", "*in"}
    write_csv(tmp_path / "b.csv", BREAKDOWN_COLUMNS, breakdown_rows(m, sets))
    back = read_csv(tmp_path / "b.csv")
    assert rates_from_breakdown(back) == rates_from_breakdown(breakdown_rows(m, sets))


def test_sweep_endpoints(trained):
    sets = [pick(trained.sets, SuiteKind.CFSpatial), pick(trained.sets, SuiteKind.CFObject)]
    sweep = guidance_sweep(sets, va(trained, 1.5), [0.0, 1.0], trials=4, seed=1)
    assert [w for w, _ in sweep] == [0.0, 1.0]
    base = run_suite(sets, baseline(trained), 4, 1)
    alone = run_suite(sets, GuidanceConfig(1.0, cond_params=trained.va), 4, 1)
    assert strip(metrics_rows(sweep[1][1])) == strip(metrics_rows(base))
    assert strip(metrics_rows(sweep[0][1])) == strip(metrics_rows(alone))
    with pytest.raises(ValueError):
        guidance_sweep(sets, va(trained, 1.5), [], trials=1)


def test_cf_focused_table(trained):
    sets = [s for s in trained.sets if s.kind is SuiteKind.CFSpatial][:2]
    cmp = compare_cf_focused(sets, baseline(trained), trials=3, seed=0)
    assert [d["set_id"] for d in cmp.deltas] == [s.id for s in sets]
    assert all(-1 <= d["faithful_grounding"] <= 1 for d in cmp.deltas)
    assert all(t.task_id.endswith(("cf1", "cf2")) or "/" in t.task_id for t in cmp.focused.tallies)
    assert len(cmp.focused.tallies) == len(cmp.original.select())
    assert np.isfinite(cmp.mean_faithful_grounding_delta)


# -- heatmaps ---------------------------------------------------------------


def grasp_only_set():
    lay = SceneLayout(9, 9, (ObjectSpec(0, 0, (3, 4, 3, 4)), ObjectSpec(1, 1, (6, 6, 6, 6))), (3, 4), {"tray": (7, 0, 8, 1)}, 0)
    ind = TaskSpec("G/in", ("put", "the", "bowl", "on", "the", "tray"), 0, PlaceOn(0, "tray"), 60, Observedness.InDomain)
    cf = TaskSpec("G/cf1", ("put", "the", "mug", "on", "the", "tray"), 1, PlaceOn(1, "tray"), 60, Observedness.UnderObserved)
    return SceneTaskSet("G", SuiteKind.CFObject, lay, ind, (cf,))


def always_grasp():
    p = init_params(observation_size(9, 9), 4, 0)
    b2 = np.zeros(7)
    b2[Action.GRASP] = 60.0
    return p.with_arrays([np.zeros_like(p.w1), p.b1, np.zeros_like(p.w2), b2])


def test_fixed_grasp_policy_heatmap():
    cfg = GuidanceConfig(1.0, cond_params=always_grasp())
    for variant in ("trained", "empty"):
        (h,) = grasp_heatmap([grasp_only_set()], cfg, variant, trials=10)
        assert h.counts[3, 4] == 10 and h.counts.sum() == 10
        assert h.modal_cell() == (3, 4)
    (h,) = grasp_heatmap([grasp_only_set()], cfg, "counterfactual", trials=10)
    assert h.task_id == "G/cf1" and h.counts[3, 4] == 10
    with pytest.raises(ValueError):
        grasp_heatmap([grasp_only_set()], cfg, "shuffled")


def test_heatmap_total_bounded(trained):
    s = pick(trained.sets, SuiteKind.CFSpatial)
    for variant in ("trained", "counterfactual", "empty"):
        for h in grasp_heatmap([s], baseline(trained), variant, trials=8, seed=2):
            assert h.counts.shape == (9, 9) and 0 <= h.counts.sum() <= 8


def test_heatmap_outputs():
    (h,) = grasp_heatmap([grasp_only_set()], GuidanceConfig(1.0, cond_params=always_grasp()), "trained", trials=4)
    text = heatmap_csv(h)
    assert len(text.splitlines()) == 9 and text.splitlines()[3].split(",")[4] == "4"
    svg = heatmap_svg(h, marks={(3, 4): "target"})
    assert svg.startswith("<svg") and svg.count("<rect") == 82
