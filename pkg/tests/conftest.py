import sys
import time

import numpy as np
import pytest

from pathdiff.data import gen_dataset
from pathdiff.model import ModelConfig, assemble_model
from pathdiff.train import TrainConfig, make_optimizer, make_schedule, train
from pathdiff.verify import tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def desk_run():
    """The 4-block desk model trained for 500 steps on 256 scenes (shared, trained once)."""
    mcfg = ModelConfig()
    tcfg = TrainConfig(steps=500)
    records = gen_dataset(256, 0)
    model = assemble_model(mcfg, tcfg.seed)
    sched = make_schedule(mcfg)
    t0 = time.perf_counter()
    history = train(model, records, sched, make_optimizer(model, tcfg), tcfg)
    return {"model": model, "history": history, "seconds": time.perf_counter() - t0,
            "records": records, "sched": sched}


def pytest_terminal_summary(terminalreporter):
    results = {}
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and hasattr(mod, "RESULTS"):
            results.update(mod.RESULTS)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(results, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(results[ac])
