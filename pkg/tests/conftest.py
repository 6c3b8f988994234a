from types import SimpleNamespace

import pytest

from caglab.dataset import collect_demos
from caglab.pipeline import ExperimentConfig
from caglab.policy import train
from caglab.suites import make_benchmark


@pytest.fixture(scope="session")
def trained():
    """Default benchmark, dataset and cond/va policies for seed 0."""
    cfg = ExperimentConfig()
    sets = make_benchmark(cfg.suites, 0, tuple(cfg.held_out_classes))
    ds = collect_demos(sets, cfg.bias(), 0)
    cond = train(ds, cfg.train_config("cond", 0), conditioned=True)
    va = train(ds, cfg.train_config("va", 0), conditioned=False)
    return SimpleNamespace(cfg=cfg, sets=sets, ds=ds, cond=cond, va=va)
