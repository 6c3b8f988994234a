"""The config-driven pipeline, end to end, on a reduced config.

Run: python3 demos/03_pipeline.py [output_dir]
The same steps are available as `caglab gen|collect|train|eval|sweep|report`.
"""

import sys
import tempfile
from pathlib import Path

from caglab import pipeline as pl

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "run"

cfg = pl.config_from_dict({
    "n_seeds": 2,
    "suites": {"CFSpatial": 2, "CFObject": 2, "CFLong": 1, "CFOOD": 1},
    "trials": 10,
    "heatmap_trials": 10,
    "sweep": {"omega_grid": [0, 1, 1.5, 3, 8]},
    "output_dir": str(out),
})
print(cfg.dumps())  # this JSON is what `--config` expects

summary = pl.run_all(cfg)
print(summary.read_text())

seed0 = pl.RunPaths(out, cfg.base_seed).root
print("files under", seed0)
for p in sorted(seed0.rglob("*")):
    if p.is_file() and p.parent.name != "heatmaps":
        print("  ", p.relative_to(seed0))
print("  heatmaps/:", len(list((seed0 / "heatmaps").glob("*.svg"))), "svg files")
