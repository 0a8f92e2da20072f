import sys

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_pretrained():
    """Pre-trained models from a very short run on a small dataset (smoke scale)."""
    from flap.affordance import AffordanceConfig
    from flap.datagen import DatasetConfig, generate_trajectories
    from flap.finetune import FinetuneConfig
    from flap.gcrl import IQLConfig
    from flap.planner import PlannerConfig
    from flap.experiment import pipeline as PL

    data = DatasetConfig(n_trajectories=60, seed=4)
    trajs = generate_trajectories(data)
    pre = PL.PretrainConfig(iql_steps=200, affordance_steps=100, raw_affordance_steps=100, log_every=100,
                            calibration_pairs=2000)
    models = PL.run_pretrain(trajs, IQLConfig(hidden=32), AffordanceConfig(hidden=32), pre, PlannerConfig(),
                             FinetuneConfig(), seed=0)
    return data, trajs, models


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        ok, detail = results.get(n, (None, "not run"))
        status = "NOT RUN" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
