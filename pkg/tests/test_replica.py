from __future__ import annotations

import pytest

from pftlog.config import validate_config
from pftlog.crypto import make_keys
from pftlog.ledger import LedgerError, Vote, make_batch, vote_message
from pftlog.messages import AppendEntry, SyncRequest
from pftlog.replica import Broadcast, Replica, ReplicaConfig, Send
from pftlog.sim.harness import ClientLoad, DelayModel, ScenarioConfig, Simulator, run_scenario
from pftlog.sim.scenarios import SOAK_PROFILES, replay_worked_example, walkthrough_config
from pftlog.view_change import ViewChangeMsg


def steady(n=4, count=20, **kw) -> ScenarioConfig:
    opts = dict(duration=1500, delays=DelayModel(delta=5, constant=True),
                load=ClientLoad(count=count, interval=10, start=50), view_timeout=1000)
    opts.update(kw)
    return ScenarioConfig(SOAK_PROFILES[n], **opts)


def lone_replica(lag_window=16) -> Replica:
    prof = validate_config(SOAK_PROFILES[4])
    signers, keys = make_keys(4)
    return Replica(ReplicaConfig(1, prof, lag_window=lag_window), signers[1], keys)


def test_lag_window_boundary():
    r = lone_replica(lag_window=16)
    r.commit_index, r.audit_index = 0, 0
    assert r.enforce_lag()
    r.commit_index = 16
    assert r.enforce_lag()
    r.commit_index = 17
    assert not r.enforce_lag()


def test_only_leader_proposes():
    r = lone_replica()
    r.v_curr = 2  # leader of view 2 is replica 2
    with pytest.raises(LedgerError):
        r.leader_propose(0, [b"x"])


def test_first_proposal_after_stabilization_is_signed():
    res = run_scenario(steady(count=5))
    nv = res.trace.of_kind("new_view")[0]
    leader = nv.node
    proposals = [e for e in res.trace.of_kind("propose", node=leader) if e.data["batch"].view == nv.data["view"]]
    stable = res.trace.of_kind("stable", node=leader)[0]
    first = next(e for e in proposals if e.order > stable.order)
    assert first.data["batch"].seq == nv.data["seq"] + 1
    assert first.data["batch"].leader_sig is not None


def test_signing_interval_ten():
    res = run_scenario(steady(count=110, signing_interval=10, max_batch_size=1, duration=4000,
                              load=ClientLoad(count=110, interval=8, start=50), view_timeout=2000))
    batches = [e.data["batch"] for e in res.trace.of_kind("propose") if not e.data["batch"].new_view]
    assert len(batches) >= 100
    for b in batches[:100]:
        assert (b.leader_sig is not None) == (b.seq % 10 == 0), b.seq
    assert res.report.passed


def test_stalled_auditor_halts_within_window():
    def withhold(now, src, dst, msg):
        # three of seven voters go quiet: commits continue, audits stall
        return not (isinstance(msg, Vote) and src in (4, 5, 6) and now >= 300)

    for w in (4, 16):
        cfg = steady(n=7, count=200, lag_window=w, max_batch_size=1, duration=3000,
                     load=ClientLoad(count=200, interval=5, start=50), view_timeout=100_000)
        res = run_scenario(cfg, withhold)
        proposals = res.trace.of_kind("propose")
        leader = proposals[-1].node
        last_audit = res.trace.of_kind("audit", node=leader)[-1]
        # proposals made once a commit is visibly ahead of the frozen audit index
        stalled = [e for e in proposals if e.order > last_audit.order and e.data["lag"] > 0]
        assert len(stalled) == w
        assert res.trace.of_kind("throttle", node=leader)
        assert all(e.data["lag"] <= w for e in proposals)


def test_vote_counts_for_ancestors():
    # only votes on every third batch reach the leader
    def sparse(now, src, dst, msg):
        return not isinstance(msg, Vote) or msg.batch_seq < 2 or msg.batch_seq % 3 == 0

    res = run_scenario(steady(count=30, max_batch_size=1, heartbeats=False, signing_interval=3), sparse)
    leader = res.trace.of_kind("propose")[0].node
    qcs = [e.data["seq"] for e in res.trace.of_kind("commit_qc", node=leader)]
    assert qcs and all(s % 3 == 0 for s in qcs)
    commits = res.trace.of_kind("commit", node=leader)
    # commits jump over seqs nobody voted on directly
    assert any(e.data["new"] - e.data["old"] == 3 for e in commits)


def test_follower_votes_direct_child():
    res = run_scenario(steady(count=3))
    votes = res.trace.of_kind("vote", node=2)
    accepted = {e.data["seq"]: e.data["digest"] for e in res.trace.of_kind("accept", node=2)}
    assert votes
    for v in votes:
        if v.data["seq"] in accepted:
            assert v.data["digest"] == accepted[v.data["seq"]]


def test_follower_syncs_missing_parent():
    cfg = steady(count=8, max_batch_size=1)
    target = {}

    def lose_one(now, src, dst, msg):
        if isinstance(msg, AppendEntry) and dst == 2 and not msg.batch.new_view and "seq" not in target:
            target["seq"] = msg.batch.seq
            return False
        return True

    res = run_scenario(cfg, lose_one)
    assert res.trace.census["SyncRequest"] >= 1
    voted = {e.data["seq"] for e in res.trace.of_kind("vote", node=2)}
    assert target["seq"] + 1 in voted
    assert res.replicas[2].branch.at(target["seq"]) is not None
    assert res.report.passed


def test_conflicting_append_triggers_view_change():
    sim = Simulator(steady(count=6))
    sim.run(until=600)
    follower = sim.replicas[2]
    leader_id = follower.node_state().leader
    tip = follower.branch.tip
    parent = follower.branch.at(tip.seq - 1)
    signer = sim.signers[leader_id]
    sibling = make_batch(follower.v_curr, tip.seq, parent.digest, follower.commit_index, follower.high_qc,
                         [b"forged"], signer=signer)
    child = make_batch(follower.v_curr, tip.seq + 1, sibling.digest, follower.commit_index, follower.high_qc,
                       [b"forged-2"], signer=signer)
    follower.store.add(sibling)
    effects = follower.on_message(600, leader_id, AppendEntry(child))
    assert any(isinstance(e, Broadcast) and isinstance(e.msg, ViewChangeMsg) for e in effects)
    assert follower.phase == "view-change"
    assert follower.branch.tip == tip


def test_unknown_parent_sends_sync_request():
    sim = Simulator(steady(count=6))
    sim.run(until=600)
    follower = sim.replicas[2]
    leader_id = follower.node_state().leader
    tip = follower.branch.tip
    signer = sim.signers[leader_id]
    gap = make_batch(follower.v_curr, tip.seq + 1, tip.digest, follower.commit_index, follower.high_qc,
                     [b"gap"], signer=signer)
    child = make_batch(follower.v_curr, tip.seq + 2, gap.digest, follower.commit_index, follower.high_qc,
                       [b"after-gap"], signer=signer)
    effects = follower.on_message(600, leader_id, AppendEntry(child))
    reqs = [e for e in effects if isinstance(e, Send) and isinstance(e.msg, SyncRequest)]
    assert reqs and reqs[0].msg.want == gap.digest


def test_worked_example_quorums():
    res = replay_worked_example()
    leader = 4
    qcs = {e.data["seq"]: e for e in res.trace.of_kind("commit_qc", node=leader)}
    assert len(qcs[2].data["voters"]) == 3
    audit_qcs = [e for e in res.trace.of_kind("audit_qc", node=leader) if e.data["qc"].batch_seq == 2]
    assert audit_qcs[0].data["trigger_voter"] == 2 and audit_qcs[0].data["trigger_seq"] == 3
    assert len(audit_qcs[0].data["voters"]) == 4
    fast = [e for e in res.trace.of_kind("audit_qc", node=leader) if e.data["qc"].fast and e.data["qc"].batch_seq > 1]
    assert fast and fast[0].data["qc"].batch_seq == 5 and len(fast[0].data["voters"]) == 5


def test_fast_path_disabled_treats_fast_qc_as_slow():
    from dataclasses import replace
    from pftlog.sim.scenarios import _walkthrough_filter

    cfg = replace(walkthrough_config(), fast_path_override=False)
    res = run_scenario(cfg, _walkthrough_filter)
    assert res.trace.of_kind("audit")
    assert all(e.data["path"] == "slow" for e in res.trace.of_kind("audit"))
    fast_qcs = [e for e in res.trace.of_kind("audit_qc") if e.data["qc"].fast]
    assert fast_qcs  # the unanimous QC still forms, it just audits nothing alone
    assert res.report.passed


def test_invalid_vote_signature_flags_voter():
    sim = Simulator(steady(count=4))
    sim.run(until=500)
    leader = sim.replicas[sim.replicas[0].node_state().leader]
    tip = leader.branch.tip
    nxt = leader.leader_propose(500, [b"probe"]).batch
    leader.drain()
    forged = sim.signers[3].sign(b"not a vote")
    voter = next(i for i in range(4) if i != leader.id)
    leader.on_message(501, voter, Vote(leader.v_curr, nxt.digest, nxt.seq, voter, ((nxt.seq, forged),)))
    assert voter in leader.flagged
    assert tip.seq + 1 == nxt.seq


def test_duplicate_vote_is_idempotent():
    sim = Simulator(steady(count=0, heartbeats=False))
    sim.run(until=500)
    leader = sim.replicas[sim.replicas[0].node_state().leader]
    batch = leader.leader_propose(500, [b"dup"]).batch
    leader.drain()
    voter = next(i for i in range(4) if i != leader.id)
    sig = sim.signers[voter].sign(vote_message(batch.view, batch.seq, batch.digest))
    vote = Vote(leader.v_curr, batch.digest, batch.seq, voter, ((batch.seq, sig),))
    leader.on_message(501, voter, vote)
    before = (dict(leader.pending_qcs.get(batch.seq, {})), dict(leader.signed_votes.get(batch.seq, {})))
    leader.on_message(502, voter, vote)
    after = (dict(leader.pending_qcs.get(batch.seq, {})), dict(leader.signed_votes.get(batch.seq, {})))
    assert before == after
    assert voter not in leader.flagged
