import numpy as np
import pytest
import torch

from lesionseg.config import ModelConfig

torch.set_num_threads(1)

# Acceptance outcomes collected by tests/test_acceptance.py, reported at the end of the run.
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def tiny_config():
    """Small but complete model for fast structural and gradient tests."""
    return ModelConfig(encoder_channels=(4, 8, 8, 8, 8), decoder_channels=(4, 8, 8, 8, 8),
                       input_size=(32, 32), heads=2, ffn_expansion=2, seed=3)
