"""Shared fixtures.

Critical-value tables are expensive to build, so the ones used across
several test modules are session scoped and fully materialized once.
"""

import pytest

from pairwise_closure.closure import CriticalValueTable, critical_values
from pairwise_closure.model import TrialConfig
from pairwise_closure.sequential import BoundarySchedule, SpendingSchedule, gs_boundaries


@pytest.fixture(scope="session")
def cfg_k3() -> TrialConfig:
    return TrialConfig.single_stage(3, 1.0, 100)


@pytest.fixture(scope="session")
def cfg_k4() -> TrialConfig:
    return TrialConfig.single_stage(4, 1.0, 100)


@pytest.fixture(scope="session")
def table_k3(cfg_k3) -> CriticalValueTable:
    table = critical_values(cfg_k3, 0.05, seed=1)
    table.entries()
    return table


@pytest.fixture(scope="session")
def table_k4(cfg_k4) -> CriticalValueTable:
    table = critical_values(cfg_k4, 0.05, seed=1)
    table.entries()
    return table


@pytest.fixture(scope="session")
def table_k5_loose() -> CriticalValueTable:
    # loose tolerances: agreement tests only need a consistent table,
    # not an accurate one
    cfg = TrialConfig.single_stage(5, 1.0, 100)
    table = critical_values(cfg, 0.05, seed=1, accuracy=3e-4, tol=2e-3)
    table.entries()
    return table


@pytest.fixture(scope="session")
def cfg_k3_q2() -> TrialConfig:
    base = TrialConfig.single_stage(3, 1.0, 50)
    return base.with_stage_n(((50, 50, 50), (100, 100, 100)))


@pytest.fixture(scope="session")
def gs_k3_q2(cfg_k3_q2) -> BoundarySchedule:
    sched = SpendingSchedule.power_family(0.05, (0.5, 1.0), rho=1.0)
    bounds = gs_boundaries(cfg_k3_q2, sched, seed=3)
    bounds.entries()
    return bounds
