"""One pass/fail test per acceptance criterion."""
from __future__ import annotations

import asyncio
import contextlib
import io
import json
import random
import signal
import statistics
import subprocess
import sys
import time

import pytest

from pftlog import kv
from pftlog.cli import main
from pftlog.config import PftParameters, min_platforms, validate_config
from pftlog.receipts import make_audit_receipt, make_commit_receipt, verify_receipt
from pftlog.sim.faults import CRASH, FaultSpec
from pftlog.sim.harness import ClientLoad, DelayModel, ScenarioConfig, run_scenario
from pftlog.sim.invariants import (
    AUDITED_AGREEMENT,
    COMMIT_AGREEMENT,
    COMMIT_PRESERVATION,
    LIVENESS_BOUND,
)
from pftlog.sim.metrics import measure
from pftlog.sim.scenarios import (
    SOAK_PROFILES,
    replay_worked_example,
    run_ablation,
    run_equivocation,
    run_liveness,
    soak_config,
)

from conftest import RECEIPT_TXNS
from test_net import free_base_port


# 1


def test_criterion_1_quorum_math():
    t0 = time.monotonic()
    cases = [
        (["--c", "1", "--pi-safe", "1", "--platform-sizes", "1,1,1,1"], 4),
        (["--c", "2", "--pi-safe", "1", "--platform-sizes", "2,2,2,1"], 7),
        (["--c", "3", "--pi-safe", "1", "--platform-sizes", "2,2,2,2,1"], 9),
        (["--pi-safe", "1"], 2),
        (["--pi-safe", "1", "--pi-live", "1"], 4),
        (["--c", "1", "--pi-safe", "1", "--pi-live", "1", "--platform-sizes", "3,3,3,3"], 12),
    ]
    for argv, n in cases:
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            assert main(["--json", "plan", *argv]) == 0
        rec = json.loads(buf.getvalue())
        assert rec["n"] == n == rec["min_nodes"]
    # the single large platform example needs only four nodes for safety
    assert validate_config(PftParameters((3, 1), pi_safe=1)).n == 4
    assert min_platforms(1, 0) == 2 and min_platforms(1, 1) == 4
    for ps in range(4):
        for pl in range(4):
            assert min_platforms(ps, pl) == (ps + 1 if pl == 0 else 2 * pl + ps + 1)
    assert time.monotonic() - t0 < 1.0


# 2


def test_criterion_2_worked_example_event_order():
    t0 = time.monotonic()
    res = replay_worked_example()
    leader = 4
    A, B, C, D = 2, 3, 4, 5
    milestones = []
    for e in res.trace.events:
        if e.node != leader:
            continue
        if e.kind == "commit_qc":
            milestones.append(("commit_qc", e.data["seq"], len(e.data["voters"])))
        elif e.kind == "commit":
            milestones.append(("commit", e.data["new"]))
        elif e.kind == "audit_qc" and e.data["qc"].batch_seq > 1:
            q = e.data["qc"]
            milestones.append(("audit_qc", q.batch_seq, q.fast, e.data["trigger_seq"], e.data["trigger_voter"],
                               len(e.data["voters"])))
        elif e.kind == "audit":
            milestones.append(("audit", e.data["new"], e.data["path"]))
    r3 = 2
    assert milestones == [
        ("commit_qc", A, 3), ("commit", A),
        ("commit_qc", B, 3), ("commit", B),
        ("audit_qc", A, False, B, r3, 4),          # R3's chained vote on B completes A's audit QC
        ("audit", 1, "slow"),                      # the blank new-view batch, via A's QC
        ("commit_qc", C, 3), ("commit", C),
        ("audit_qc", B, False, C, 1, 4),
        ("audit_qc", C, False, C, r3, 4),
        ("audit", A, "slow"),                      # AuditQC(C) over the QC on A carried by C
        ("commit_qc", D, 3), ("commit", D),
        ("audit_qc", D, False, D, r3, 4),
        ("audit", C, "slow"),
        ("audit_qc", D, True, D, 3, 5),            # the fifth vote makes D's QC unanimous
        ("audit", D, "fast"),
    ]
    assert res.report.passed
    assert time.monotonic() - t0 < 1.0


# 3


SOAK_SEEDS = 10_000


def test_criterion_3_safety_soak():
    audited_bad, commit_bad = [], []
    sizes = set()
    byzantine_runs = 0
    for seed in range(SOAK_SEEDS):
        cfg = soak_config(seed)
        sizes.add(cfg.params.n)
        res = run_scenario(cfg)
        if not res.report[AUDITED_AGREEMENT].passed:
            audited_bad.append(seed)
        if cfg.byzantine():
            byzantine_runs += 1
        elif not res.report[COMMIT_AGREEMENT].passed:
            commit_bad.append(seed)
    assert sizes == {4, 5, 7, 9}
    assert 0 < byzantine_runs < SOAK_SEEDS
    assert audited_bad == []
    assert commit_bad == []


# 4


@pytest.mark.parametrize("n", [4, 5, 7, 9])
@pytest.mark.parametrize("constant", [True, False])
def test_criterion_4_no_extra_messages(n, constant):
    def run(audit: bool):
        cfg = ScenarioConfig(SOAK_PROFILES[n], seed=3, duration=1500, delays=DelayModel(delta=10, constant=constant),
                             load=ClientLoad(count=40, interval=17, start=50), audit_enabled=audit,
                             idle_heartbeat=True, view_timeout=400)
        res = run_scenario(cfg)
        m = measure(res.trace, node=1)
        return dict(res.trace.census), m.batches, len(m.committed)

    audited, reference = run(True), run(False)
    assert audited[1] == reference[1] and audited[2] == reference[2] == 40
    assert audited[0] == reference[0]


# 5


def test_criterion_5_slow_fast_ratio():
    t0 = time.monotonic()
    for n in (4, 7, 9):
        medians = []
        for crash in (False, True):
            cfg = ScenarioConfig(SOAK_PROFILES[n], seed=1, duration=3000,
                                 delays=DelayModel(delta=10, constant=True),
                                 faults=[FaultSpec(CRASH, (n - 1,), 0)] if crash else [],
                                 load=ClientLoad(count=100, interval=25, start=100),
                                 signing_interval=1, view_timeout=1000)
            m = measure(run_scenario(cfg).trace, node=1)
            assert len(m.audited) == 100
            if crash:
                assert set(m.audit_paths) == {"slow"}
            else:
                # only the blank new-view batch at boot takes the slow path
                assert m.audit_paths["slow"] == 1 and m.audit_paths["fast"] > 100
            medians.append(statistics.median(m.audit_latencies))
        ratio = medians[1] / medians[0]
        assert 1.6 <= ratio <= 2.3, (n, medians)
    assert time.monotonic() - t0 < 60


# 6


def test_criterion_6_stabilization_ablation():
    off = run_ablation(False)
    assert COMMIT_PRESERVATION in off.report.violated()
    lost = [(seq, d) for e in off.trace.of_kind("rollback") for seq, d in e.data["removed"]]
    committed_v2 = {e.data["digest"] for e in off.trace.of_kind("commit") if e.data["view"] == 2}
    assert any(d in committed_v2 for _, d in lost)

    on = run_ablation(True)
    assert on.report.passed
    assert on.report[COMMIT_PRESERVATION].checked
    committed_v2 = {e.data["digest"] for e in on.trace.of_kind("commit") if e.data["view"] == 2}
    assert committed_v2
    removed = {d for e in on.trace.of_kind("rollback") for _, d in e.data["removed"]}
    assert not committed_v2 & removed


# 7


def test_criterion_7_equivocation_recovery():
    res = run_equivocation()
    trace = res.trace
    start = 300
    divergent = (5, 6, 0)

    first_nv = next(e for e in trace.of_kind("new_view") if e.data["view"] == 2)
    # commits continue on both sides of the split after the equivocation starts
    for side in ((2, 3, 4), divergent):
        assert any(start < e.time < first_nv.time for r in side for e in trace.of_kind("commit", node=r))
    # audits stall: nothing audits between shortly after the split and the new view
    stalled = [e for e in trace.of_kind("audit") if start + 100 < e.time < first_nv.time]
    assert stalled == []
    # a timeout precedes the view change
    timeouts = [e for e in trace.of_kind("timeout") if e.data["view"] == 1]
    assert timeouts and max(e.order for e in timeouts) < first_nv.order
    # the new view chooses one branch, and the other side rolls back to it
    rollbacks = trace.of_kind("rollback")
    assert {e.node for e in rollbacks} == set(divergent)
    assert all(e.order > first_nv.order for e in rollbacks)
    # after the rollback every divergent replica audits again in the new view
    for r in divergent:
        rb = next(e for e in rollbacks if e.node == r)
        assert any(e.order > rb.order and e.data["view"] == 2 for e in trace.of_kind("audit", node=r))
    assert res.report.passed


# 8


def test_criterion_8_liveness_bound():
    failed = []
    faulty_leaders = 0
    for seed, res in run_liveness(range(1000)):
        assert res.report[LIVENESS_BOUND].checked
        if not res.report[LIVENESS_BOUND].passed:
            failed.append(seed)
        faulty_leaders += bool(res.config.faults)
    assert faulty_leaders > 0
    assert failed == []


# 9


def test_criterion_9_receipt_robustness(fast_run, slow_run):
    for run, fast in ((fast_run, True), (slow_run, False)):
        rep = run.replicas[1]
        keys = rep.keyring
        commits, audits = [], []
        for i in range(RECEIPT_TXNS):
            txn = f"tx-{i}".encode()
            batch = rep.branch.at(rep.txn_seq[txn])
            commits.append(make_commit_receipt(txn, batch, rep.signer, run.profile))
            audits.append(make_audit_receipt(txn, batch, rep))
        for r in commits + audits:
            assert verify_receipt(r.encode(), run.profile, keys)
        for a in audits:
            assert len(a.qcs) == (1 if a.fast else 2)
        if fast:
            assert any(a.fast for a in audits)
        else:
            assert not any(a.fast for a in audits)
        classes = [commits[5], audits[5]] if not fast else [commits[5], next(a for a in audits if a.fast)]
        rng = random.Random(42)
        for receipt in classes:
            data = receipt.encode()
            for _ in range(1000):
                m = bytearray(data)
                m[rng.randrange(len(m))] ^= rng.randrange(1, 256)
                assert not verify_receipt(bytes(m), run.profile, keys)


# 10


def test_criterion_10_process_cluster_smoke(tmp_path):
    from pftlog.net import init_local_cluster, submit_async
    from pftlog.net.client import cluster_status_async

    t0 = time.monotonic()
    n = 5
    cluster = init_local_cluster(tmp_path, PftParameters((1,) * n, pi_safe=2, c=1),
                                 base_port=free_base_port(n), view_timeout_ms=400)
    procs: dict[int, subprocess.Popen] = {}

    def spawn(i):
        procs[i] = subprocess.Popen(
            [sys.executable, "-m", "pftlog", "run", str(tmp_path / "cluster.yaml"), "--id", str(i),
             "--log-level", "warning"],
            stderr=open(tmp_path / f"replica-{i}.log", "a"))

    def kill(i):
        procs[i].send_signal(signal.SIGKILL)
        procs[i].wait()

    async def load(first_seq, count, mode):
        return await asyncio.gather(*(
            submit_async(cluster, kv.put(7, first_seq + i, b"k%d" % (first_seq + i), b"v"), mode, timeout=30,
                         first=i) for i in range(count)))

    async def converged(alive, min_audit):
        for _ in range(100):
            states = [s for i, s in enumerate(await cluster_status_async(cluster)) if i in alive]
            if all(s is not None and s["audit_index"] >= min_audit for s in states):
                return states
            await asyncio.sleep(0.2)
        raise AssertionError(f"no convergence: {states}")

    async def scenario():
        await asyncio.sleep(1.0)
        receipts = list(await load(0, 40, "audit"))
        leader = (await cluster_status_async(cluster))[0]["leader"]
        follower = (leader + 1) % n
        kill(follower)
        receipts += await load(40, 40, "commit")
        spawn(follower)
        await asyncio.sleep(1.0)
        receipts += await load(80, 20, "audit")
        kill(leader)
        receipts += await load(100, 40, "audit")
        alive = set(range(n)) - {leader}
        top = max(r.batch_seq for r in receipts)
        states = await converged(alive, top)
        return leader, follower, receipts, states

    for i in range(n):
        spawn(i)
    try:
        leader, follower, receipts, states = asyncio.run(scenario())
    finally:
        for p in procs.values():
            if p.poll() is None:
                p.terminate()
        for p in procs.values():
            p.wait()

    keys = cluster.keyring()
    assert len(receipts) == 140
    assert all(verify_receipt(r.encode(), cluster.profile, keys) for r in receipts)
    assert max(r.qcs[-1].view for r in receipts[100:]) > min(r.qcs[-1].view for r in receipts[:40])
    by_id = {s["replica"]: s for s in states}
    assert by_id[follower]["restored"]
    assert all(s["leader"] != leader for s in states)
    # the survivors agree on every batch they all report
    common = set.intersection(*(set(s["recent"]) for s in states))
    assert common
    for seq in common:
        assert len({s["recent"][seq] for s in states}) == 1
    assert time.monotonic() - t0 < 120
