import json

import pytest

TINY = {
    "seed": 3,
    "iterations": 2,
    "subset_size": 4,
    "ppo_passes": 1,
    "data": {"n_source_train": 12, "n_source_val": 3, "n_source_test": 3, "n_target_train": 8,
             "n_target_test": 4, "shape": {"size": 32}},
    "net": {"widths": [4, 8]},
    "pretrain": {"epochs": 3, "lr": 5e-3, "batch_size": 6},
    "reward": {"epochs": 1, "batch_size": 8},
    "ppo": {"ppo_epochs": 1, "batch_size": 4},
}


@pytest.fixture
def tiny_config():
    return json.loads(json.dumps(TINY))


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(tiny_config))
    return p


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
