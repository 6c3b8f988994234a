import json

import pytest

from caglab.sim import PlaceOn, Sequence
from caglab.suites import (
    CLASS_NAMES,
    BiasProfile,
    NotRemovable,
    Observedness,
    SceneTaskSet,
    SuiteKind,
    TaskSpec,
    apply_cf_focused,
    dumps_set,
    feasibility_check,
    is_strict_prefix,
    load_sets,
    make_benchmark,
    make_suite,
    save_sets,
    suite_path,
)


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(seed=0)


def test_default_benchmark_shape(bench):
    assert len(bench) == 20
    kinds = [s.kind for s in bench]
    assert [kinds.count(k) for k in SuiteKind] == [6, 4, 4, 6]


def test_every_set_has_one_in_domain_task(bench):
    for s in bench:
        assert s.in_domain.observedness is Observedness.InDomain
        assert s.in_domain.target_object_id == s.layout.training_task_object_id
        assert len(s.counterfactuals) == 2
        assert all(t.observedness is not Observedness.InDomain for t in s.counterfactuals)
        assert len({t.id for t in s.tasks}) == 3


def test_spatial_sets_share_class_and_differ_by_one_token(bench):
    for s in bench:
        if s.kind is not SuiteKind.CFSpatial:
            continue
        assert len({o.class_id for o in s.layout.objects}) == 1
        instr = [t.instruction for t in s.tasks]
        for a in instr[1:]:
            assert len(a) == len(instr[0])
            assert sum(x != y for x, y in zip(a, instr[0])) == 1


def test_ood_targets_are_held_out():
    sets = make_suite(SuiteKind.CFOOD, 2, 3, held_out=(10, 11))
    for s in sets:
        cls = {o.id: o.class_id for o in s.layout.objects}
        assert all(cls[t.target_object_id] in (10, 11) for t in s.counterfactuals)
        assert all(t.observedness is Observedness.OOD for t in s.counterfactuals)
        assert cls[s.in_domain.target_object_id] not in (10, 11)


def test_long_prefix_and_reversed():
    s = make_suite(SuiteKind.CFLong, 1, 0)[0]
    rev, pre = s.counterfactuals
    assert is_strict_prefix(pre, s.in_domain)
    assert not is_strict_prefix(rev, s.in_domain)
    assert not is_strict_prefix(s.in_domain, s.in_domain)
    assert s.in_domain.success_predicate == Sequence((PlaceOn(0, "tray"), PlaceOn(1, "tray")))
    assert rev.success_predicate == Sequence((PlaceOn(1, "tray"), PlaceOn(0, "tray")))
    assert rev.instruction != s.in_domain.instruction
    assert sorted(rev.instruction) != sorted(s.in_domain.instruction)


def test_scene_classes_distinct_across_object_and_long(bench):
    seen = [frozenset(o.class_id for o in s.layout.objects) for s in bench if s.kind in (SuiteKind.CFObject, SuiteKind.CFLong)]
    assert len(seen) == len(set(seen))


def test_generation_is_pure(bench):
    again = make_benchmark(seed=0)
    assert [dumps_set(s) for s in again] == [dumps_set(s) for s in bench]
    other = make_benchmark(seed=1)
    assert [dumps_set(s) for s in other] != [dumps_set(s) for s in bench]


def test_bad_kind_rejected():
    with pytest.raises(ValueError):
        make_suite("CFNope", 1, 0)
    with pytest.raises(ValueError):
        make_suite(SuiteKind.CFObject, 0, 0)


def test_task_tokens_checked():
    with pytest.raises(ValueError):
        TaskSpec("x", ("put", "the", "pizza"), 0, PlaceOn(0, "tray"), 10, Observedness.InDomain)


def test_cf_focused(bench):
    s = next(x for x in bench if x.kind is SuiteKind.CFSpatial)
    f = apply_cf_focused(s)
    assert len(f.layout.objects) - len(f.layout.absent) == 2
    assert f.in_domain is None and f.focused
    assert [t.id for t in f.tasks] == [t.id for t in s.counterfactuals]
    for seed in range(5):
        a, b = s.build_scene(seed), f.build_scene(seed)
        assert [(o.id, o.position) for o in a.objects if o.id != s.layout.training_task_object_id] == [
            (o.id, o.position) for o in b.objects
        ]


def test_cf_focused_not_removable(bench):
    s = next(x for x in bench if x.kind is SuiteKind.CFLong)
    with pytest.raises(NotRemovable):
        apply_cf_focused(s)  # both counterfactuals touch the attractor


def test_feasibility(bench):
    assert all(feasibility_check(s) for s in bench)
    s = make_suite(SuiteKind.CFObject, 1, 0)[0]
    t = s.counterfactuals[0]
    short = TaskSpec(t.id, t.instruction, t.target_object_id, t.success_predicate, 1, t.observedness)
    tight = SceneTaskSet(s.id, s.kind, s.layout, s.in_domain, (short,))
    assert not feasibility_check(tight)


def test_bias_profile_quota():
    p = BiasProfile(200, 1, 0)
    s = make_suite(SuiteKind.CFOOD, 1, 0)[0]
    assert [p.quota(t) for t in s.tasks] == [200, 0, 0]
    with pytest.raises(ValueError):
        BiasProfile(-1, 1, 0)


def test_files_round_trip(tmp_path, bench):
    paths = save_sets(tmp_path, bench)
    assert paths[0] == tmp_path / "suites" / "CFSpatial" / "0.json"
    assert all(p == suite_path(tmp_path, s) for p, s in zip(paths, bench))
    back = load_sets(tmp_path)
    assert back == bench
    doc = json.loads(paths[0].read_text())
    assert set(doc) >= {"id", "kind", "layout", "in_domain", "counterfactuals"}


def test_instruction_vocabulary(bench):
    names = {t for s in bench for task in s.tasks for t in task.instruction if t in CLASS_NAMES}
    assert names
