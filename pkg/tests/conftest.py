from __future__ import annotations

import pytest

from pftlog.sim.faults import CRASH, FaultSpec
from pftlog.sim.harness import ClientLoad, DelayModel, ScenarioConfig, run_scenario
from pftlog.sim.scenarios import SOAK_PROFILES

RECEIPT_TXNS = 20


def receipt_run(crash: bool):
    """Four replicas with real signatures; a crashed replica forces the slow path."""
    cfg = ScenarioConfig(
        SOAK_PROFILES[4], seed=1, duration=800, delays=DelayModel(delta=10),
        load=ClientLoad(count=RECEIPT_TXNS, interval=7, start=50),
        faults=[FaultSpec(CRASH, (3,), 0)] if crash else [],
        scheme="ed25519", signing_interval=2,
    )
    return run_scenario(cfg)


@pytest.fixture(scope="session")
def fast_run():
    return receipt_run(crash=False)


@pytest.fixture(scope="session")
def slow_run():
    return receipt_run(crash=True)
