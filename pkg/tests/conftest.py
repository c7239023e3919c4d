from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from agentsched import EngineParams, generate_workload

from helpers import tiny_regime

settings.register_profile(
    "suite",
    max_examples=60,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def small_traces():
    """Twelve mixed sessions, volumes 1k-64k, one to four rounds."""
    return generate_workload(tiny_regime())


@pytest.fixture(scope="session")
def small_params():
    """Pool comfortably above the largest single-session footprint."""
    return EngineParams(total_blocks=4608, tool_worker_slots=4)
