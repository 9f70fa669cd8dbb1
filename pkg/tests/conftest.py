import sys

import numpy as np
import pytest

from ame.model import MaeModel, ModelConfig

TINY = dict(image_h=16, image_w=16, patch_size=4, channels=3, enc_layers=2, enc_dim=16, enc_heads=2,
            dec_layers=2, dec_dim=16, dec_heads=2, mlp_ratio=2)


def tiny_config(**kw):
    return ModelConfig(**{**TINY, **kw})


@pytest.fixture
def tiny_model():
    return MaeModel(tiny_config(), seed=3)


@pytest.fixture
def images():
    return np.random.default_rng(11).random((4, 3, 16, 16)).astype(np.float32)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
