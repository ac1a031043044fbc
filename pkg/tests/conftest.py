from __future__ import annotations

import numpy as np
import pytest

from rfs.envs import generate_demos, make_env
from rfs.flowpolicy import FMConfig, IntegrationSchedule, VelocityField, train_fm

# (criterion number, passed, detail) appended by tests/test_acceptance.py
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def offset_field():
    """A small field fitted to OffsetReach demos; good enough to reach the goal centre."""
    spec = make_env("OffsetReach")
    demos = generate_demos(spec, 200, np.random.default_rng(0))
    field = VelocityField(2, spec.obs_dim, hidden=(64, 64), action_scale=spec.action_bound,
                          rng=np.random.default_rng(1))
    train_fm(field, demos, FMConfig(lr=1e-3, steps=3000), rng=np.random.default_rng(2))
    return field


@pytest.fixture
def schedule():
    return IntegrationSchedule.uniform(8)
