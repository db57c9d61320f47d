import math

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from fpgap.potential import MlpConfig, init_params
from fpgap.sde import GaussianState, SdeSpec

settings.register_profile("ci", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

torch.set_default_dtype(torch.float64)


@pytest.fixture
def spec():
    return SdeSpec()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    cfg = MlpConfig.potential(2, (16, 12))
    return init_params(cfg, 3), cfg


@pytest.fixture
def stationary():
    return GaussianState(np.zeros(2), 0.5 * np.eye(2), 0.0)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), floor))


LOG_PI = math.log(math.pi)


# -- acceptance reporting ------------------------------------------------------

_CRITERIA = {}


def record_criterion(n: int, passed: bool, detail: str) -> None:
    _CRITERIA[n] = (passed, detail)
    print(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
