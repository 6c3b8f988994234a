"""A language-conditioned policy that mostly ignores its instruction, and
what dual-branch guidance does about it.

Run: python3 demos/02_vision_shortcut.py   (under a minute on one core)
"""

import numpy as np

from caglab.dataset import collect_demos
from caglab.evaluation import grasp_heatmap, run_suite
from caglab.guidance import GuidanceConfig
from caglab.policy import TrainConfig, train
from caglab.suites import BiasProfile, make_benchmark

SEED = 0

# A small benchmark: spatial and object counterfactuals. Every scene has one
# task with 200 demonstrations and two alternatives with a single one each.
sets = make_benchmark({"CFSpatial": 3, "CFObject": 2}, seed=SEED)
ds = collect_demos(sets, BiasProfile(200, 1, 0), seed=SEED)
print(len(ds), "demonstrations;", dict(list(ds.counts.items())[:3]), "...")

# Fewer demonstrations than the default benchmark, so more epochs.
tc = TrainConfig(epochs=40, seed=SEED)
cond = train(ds, tc, conditioned=True)   # sees the instruction
va = train(ds, tc, conditioned=False)    # vision only

baseline = GuidanceConfig(cond_params=cond)
guided = GuidanceConfig(1.5, wiring="VA", cond_params=cond, uncond_params=va)

print(f"\n{'':10s}{'faithful':>10s}{'biased':>10s}{'success':>10s}{'in-domain':>11s}")
for name, cfg in (("Baseline", baseline), ("VA 1.5", guided)):
    m = run_suite(sets, cfg, trials_per_task=20, base_seed=SEED)
    ind = m.rates(in_domain=True)["Average"]["faithful_success"]
    print(f"{name:10s}{m.faithful_grounding_rate:10.2f}{m.biased_grounding_rate:10.2f}"
          f"{m.faithful_success_rate:10.2f}{ind:11.2f}")
# "biased" counts trials whose first contact was the well-trained task's
# object although a different one was asked for.

# Where does the gripper grasp first on one fixed layout?
s = sets[0]
scene = s.build_scene(0)
print("\nscene", s.id, "objects at", [o.position for o in scene.objects])
for label, cfg in (("Baseline", baseline), ("VA 1.5", guided)):
    for h in grasp_heatmap([s], cfg, "counterfactual", trials=30, seed=SEED):
        print(f"\n{label}: {s.task(h.task_id).instruction}")
        for row in h.counts[:5]:
            print("  " + " ".join(f"{int(x):2d}" if x else " ." for x in row))
