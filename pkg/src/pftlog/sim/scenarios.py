"""Canned scenarios: the steady-state walk-through, the stabilization
ablation, equivocation recovery, and the random soak generator."""
from __future__ import annotations

import random

from ..config import PftParameters
from ..ledger import Vote
from .faults import (
    CRASH,
    EQUIVOCATION,
    OMISSION,
    PARTITION,
    SPOOF_BRANCH,
    SPOOF_COMMIT,
    FaultSpec,
)
from .harness import ClientLoad, DelayModel, ScenarioConfig, SimResult, run_scenario

# Steady-state walk-through: five replicas R1..R5 (ids 0..4), R5 leads.

WALKTHROUGH_LABELS = {2: "A", 3: "B", 4: "C", 5: "D"}
# votes that never reach the leader, by batch label
WALKTHROUGH_LOST_VOTES = {"A": {2, 3}, "B": {1, 3}, "C": {3}, "D": set()}


def walkthrough_config() -> ScenarioConfig:
    return ScenarioConfig(
        PftParameters((1, 1, 1, 1, 1), pi_safe=2, c=1),
        seed=0,
        duration=600,
        delays=DelayModel(delta=10, constant=True),
        load=ClientLoad(count=4, interval=100, start=100, prefix="txn"),
        signing_interval=1,
        heartbeats=False,
        view_timeout=5000,
        initial_view=3,
        # five nodes with u=1 and f_safe=2 sit exactly on the fast-path
        # boundary; the walk-through still shows the unanimous fast audit
        fast_path_override=True,
        name="worked_example",
    )


def _walkthrough_filter(now, src, dst, msg) -> bool:
    if isinstance(msg, Vote):
        label = WALKTHROUGH_LABELS.get(msg.batch_seq)
        if label is not None and src in WALKTHROUGH_LOST_VOTES[label]:
            return False
    return True


def replay_worked_example() -> SimResult:
    return run_scenario(walkthrough_config(), _walkthrough_filter)


# Stabilization ablation.
#
# Five replicas R0..R4 on one-node platforms with only new-view batches
# signed. The view-1 leader R1 obtains a late audit QC on its new-view batch,
# embeds it in a batch nobody receives, and is cut off. View 2 (leader R2)
# commits two batches and R2 is cut off in turn. R1 rejoins for the change to
# view 3, whose leader R3 sees R1's hidden branch carrying the newest QC.

ABLATION_LEADER_CUTOFF = (34, 225)
ABLATION_SECOND_CUTOFF = (240, 800)


def ablation_config(stabilization: bool) -> ScenarioConfig:
    r1_off, r2_off = ABLATION_LEADER_CUTOFF, ABLATION_SECOND_CUTOFF
    return ScenarioConfig(
        PftParameters((1, 1, 1, 1, 1), pi_safe=2, c=1),
        seed=0,
        duration=1500,
        delays=DelayModel(delta=10, constant=True),
        load=ClientLoad(times=(12, 13, 34, 35, 600, 610, 620), prefix="abl"),
        faults=[
            FaultSpec(PARTITION, (), r1_off[0], r1_off[1], {"groups": [[1], [0, 2, 3, 4]]}),
            FaultSpec(PARTITION, (), r2_off[0], r2_off[1], {"groups": [[2], [0, 1, 3, 4]]}),
        ],
        signing_interval=1000,
        max_batch_size=1,
        heartbeats=False,
        view_timeout=150,
        timeout_backoff=1,
        stabilization_enabled=stabilization,
        name="stabilization_ablation" if not stabilization else "stabilization_ablation_on",
    )


def _ablation_filter(now, src, dst, msg) -> bool:
    # view 1: R4's votes are lost, R3's first two votes are lost
    if isinstance(msg, Vote) and msg.view == 1:
        if src == 4 or (src == 3 and msg.batch_seq <= 2):
            return False
    return True


def run_ablation(stabilization: bool) -> SimResult:
    return run_scenario(ablation_config(stabilization), _ablation_filter)


# Equivocation recovery: seven replicas, the view-1 leader R1 sends one
# chain to {R2,R3,R4} and a forged one to {R5,R6,R0}.

EQUIVOCATION_PARTITIONS = ((2, 3, 4), (5, 6, 0))


def equivocation_config(seed: int = 0) -> ScenarioConfig:
    return ScenarioConfig(
        PftParameters((2, 2, 2, 1), pi_safe=1, c=2),
        seed=seed,
        duration=3000,
        delays=DelayModel(delta=10, constant=True),
        load=ClientLoad(count=60, interval=20, start=100, prefix="eq"),
        signing_interval=1,
        view_timeout=400,
        timeout_backoff=1,
        faults=[FaultSpec(EQUIVOCATION, (1,), start=300, end=None,
                          params={"partitions": [list(p) for p in EQUIVOCATION_PARTITIONS]})],
        name="equivocation",
    )


def run_equivocation(seed: int = 0) -> SimResult:
    return run_scenario(equivocation_config(seed))


# Random soak scenarios.

SOAK_PROFILES = {
    4: PftParameters((1, 1, 1, 1), pi_safe=1, c=1),
    5: PftParameters((1, 1, 1, 1, 1), pi_safe=2, c=1),
    7: PftParameters((2, 2, 2, 1), pi_safe=1, c=2),
    9: PftParameters((2, 2, 2, 2, 1), pi_safe=1, c=3),
}


def _platforms(params: PftParameters) -> list[list[int]]:
    out, nxt = [], 0
    for size in params.platform_sizes:
        out.append(list(range(nxt, nxt + size)))
        nxt += size
    return out


def soak_config(seed: int) -> ScenarioConfig:
    """A random scenario whose faults stay within the profile's budgets."""
    rng = random.Random(seed)
    n = rng.choice(sorted(SOAK_PROFILES))
    params = SOAK_PROFILES[n]
    prof_u = params.c  # pi_live = 0 in every soak profile
    platforms = _platforms(params)
    delta = rng.choice((3, 5, 8))
    gst = rng.choice((0, 0, 100, 250))
    duration = 900
    s = rng.choice((1, 1, 2, 4))
    faults: list[FaultSpec] = []
    byzantine: list[int] = []
    mode = rng.random()
    if mode < 0.55:
        # compromise up to pi_safe platforms
        chosen = rng.sample(platforms, params.pi_safe)
        byzantine = [r for plat in chosen for r in plat]
        for target in byzantine:
            kind = rng.choice((OMISSION, EQUIVOCATION, SPOOF_COMMIT, SPOOF_BRANCH, SPOOF_BRANCH))
            start = rng.randrange(0, 400)
            end = start + rng.randrange(50, 500) if rng.random() < 0.5 else None
            params_ = {}
            if kind == OMISSION:
                params_["messages"] = rng.choice((("vote",), ("view_change",), ("vote", "view_change")))
            elif kind == EQUIVOCATION:
                others = [r for r in range(n) if r != target]
                rng.shuffle(others)
                cut = rng.randrange(1, len(others))
                params_["partitions"] = [others[:cut], others[cut:]]
            elif kind == SPOOF_BRANCH:
                params_["length"] = rng.randrange(1, 8)
            faults.append(FaultSpec(kind, (target,), start, end, params_))
    honest = [r for r in range(n) if r not in byzantine]
    crash_budget = max(0, prof_u - (len(byzantine) if byzantine else 0))
    if rng.random() < 0.5 and crash_budget:
        for target in rng.sample(honest, rng.randint(1, crash_budget)):
            start = rng.randrange(0, 500)
            end = start + rng.randrange(50, 400) if rng.random() < 0.7 else None
            faults.append(FaultSpec(CRASH, (target,), start, end))
    if rng.random() < 0.3:
        members = list(range(n))
        rng.shuffle(members)
        cut = rng.randrange(1, n)
        start = rng.randrange(0, 400)
        faults.append(FaultSpec(PARTITION, (), start, start + rng.randrange(20, 200),
                                {"groups": [members[:cut], members[cut:]]}))
    return ScenarioConfig(
        params,
        seed=seed,
        duration=duration,
        delays=DelayModel(delta=delta, gst=gst, pre_gst_cap=delta * 6),
        faults=faults,
        load=ClientLoad(count=rng.randint(3, 10), interval=rng.choice((5, 20, 40)), start=20),
        signing_interval=s,
        lag_window=rng.choice((8, 64)),
        view_timeout=(4 * s + 5) * delta + rng.randrange(1, 3 * delta),
        timeout_backoff=rng.choice((1, 2)),
        name=f"soak-{seed}",
    )


def run_soak(seeds) -> list[tuple[int, SimResult]]:
    return [(seed, run_scenario(soak_config(seed))) for seed in seeds]


# Liveness: post-GST runs where up to u consecutive leaders crash.

def liveness_config(seed: int) -> ScenarioConfig:
    rng = random.Random(seed)
    n = rng.choice(sorted(SOAK_PROFILES))
    params = SOAK_PROFILES[n]
    u = params.c
    delta = rng.choice((3, 5, 8, 10))
    s = rng.choice((1, 2, 4))
    timeout = (4 * s + 5) * delta + rng.randrange(1, 2 * delta)
    crashes = rng.randint(0, u)
    at_boot = rng.random() < 0.5
    crash_time = 0 if at_boot else rng.randrange(50, 300)
    faults = [FaultSpec(CRASH, tuple(range(1, crashes + 1)), crash_time)] if crashes else []
    load = ClientLoad(count=rng.randint(1, 8), interval=rng.choice((1, 7, 30)),
                      start=crash_time + rng.randrange(0, 40))
    last = load.schedule()[-1]
    duration = last + u * timeout + (4 * s + 5) * delta + 4 * timeout
    return ScenarioConfig(
        params,
        seed=seed,
        duration=duration,
        delays=DelayModel(delta=delta),
        faults=faults,
        load=load,
        signing_interval=s,
        view_timeout=timeout,
        timeout_backoff=1,
        check_liveness=True,
        name=f"liveness-{seed}",
    )


def run_liveness(seeds) -> list[tuple[int, SimResult]]:
    return [(seed, run_scenario(liveness_config(seed))) for seed in seeds]
