import sys

import numpy as np
import pytest

from conbimamba.encoder import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(feature_dim=5, d_model=16, n_layers=2, n_speakers=2, kernels=(3, 5, 7),
                       change_hidden=8, lfa_mask=(1, 1), d_state=4, dropout=0.0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
