import os
import sys
import time
from types import SimpleNamespace

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lowbit_adapters.harness.config import RunConfig  # noqa: E402
from lowbit_adapters.harness.experiments import pretrain_source  # noqa: E402
from lowbit_adapters.harness.tasks import make_task  # noqa: E402

SMALL = {
    "task": {"source_train": 1000, "target_train": 300, "target_val": 100, "target_test": 200},
    "backbone": {"dim": 16, "heads": 2, "depth": 1},
    "pretrain": {"epochs": 6, "lr": 0.01},
    "pretrain_threshold": 0.5,
    "optim": {"epochs": 4, "lr": 0.02},
    "full_optim": {"epochs": 4, "lr": 0.003},
    "scale_grid": [1.0, 10.0],
    "sweeps": {
        "bit_widths": [1, 32],
        "budget": 8,
        "noise_trials": 2,
        "sigma_ratios": [0.0, 1.0],
        "landscape_half_width": 2,
        "hist_bins": 5,
    },
}


def small_config() -> RunConfig:
    """Seconds-scale configuration for plumbing tests."""
    return RunConfig.from_dict(SMALL)


@pytest.fixture(scope="session")
def small():
    cfg = small_config()
    data = make_task(cfg.task)
    return cfg, data, pretrain_source(cfg, data)


@pytest.fixture(scope="session")
def default_env():
    """Default configuration with its pre-trained backbone (about ten seconds)."""
    t0 = time.process_time()
    cfg = RunConfig()
    data = make_task(cfg.task)
    backbone = pretrain_source(cfg, data)
    return SimpleNamespace(cfg=cfg, data=data, backbone=backbone, pretrain_cpu_s=time.process_time() - t0)


@pytest.fixture(scope="session")
def default_setup(default_env):
    return default_env.cfg, default_env.data, default_env.backbone


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
