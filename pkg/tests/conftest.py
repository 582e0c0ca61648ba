import copy

import pytest

from expertgrowth.config import config_from_dict

# Small enough to run the whole pipeline in seconds, large enough for every stage to have data.
TINY = {
    "pca_dim": 8,
    "env": {"horizon": 120, "target_profile": [[0, 0.3], [60, 0.6]]},
    "planner": {"n_candidates": 32, "plan_horizon": 6},
    "collect": {"sysid_episodes": 3, "id_episodes": 6, "shift_episodes": 6, "detect_episodes": 4},
    "train": {"epochs": 20},
    "finetune": {"steps": 20},
    "first": {"base": 109000, "count": 6},
    "second": {"base": 200000, "count": 6},
    "bootstrap": {"B": 500},
    "detect": {"gmm_k": 4, "bic_ks": [1, 2, 3], "iso_trees": 20},
}


def tiny_config(**overrides):
    data = copy.deepcopy(TINY)
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(data.get(key), dict):
            data[key].update(val)
        else:
            data[key] = val
    return config_from_dict(data)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    from expertgrowth.pipeline import run_pipeline

    out = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config()
    run_pipeline(cfg, out)
    return cfg, out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
