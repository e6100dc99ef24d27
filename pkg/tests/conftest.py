import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ctdloco.env import EnvConfig
from ctdloco.pca import collect_rollouts, fit_pca
from ctdloco.policy import PolicyDims, PolicyNet
from ctdloco.trainer import TrainConfig, train

# criterion id -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    def record(key, passed, detail=""):
        ACCEPTANCE[key] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'} {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dims():
    return PolicyDims(d_obs=3, mlp_widths=(5,), n_cells=4, d_act=2)


@pytest.fixture
def small_net(small_dims):
    return PolicyNet.random(small_dims, seed=7)


@pytest.fixture(scope="session")
def env_cfg():
    return EnvConfig()


def _trained(k):
    cfg = TrainConfig(k_trunc=k)
    init = PolicyNet.random(cfg.policy_dims(), seed=cfg.seed)
    return train(init, EnvConfig(), cfg)


@pytest.fixture(scope="session")
def trained16():
    """``(net, report)`` for the default training run (k_trunc=16, seed 0)."""
    return _trained(16)


@pytest.fixture(scope="session")
def trained4():
    return _trained(4)


@pytest.fixture(scope="session")
def walking16(trained16):
    """Collected rollouts and PC basis of the k=16 model."""
    ds = collect_rollouts(trained16[0], EnvConfig())
    return ds, fit_pca(ds)
