from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pftlog.kv import (
    READ_AUDITED,
    KVError,
    KVOp,
    RollbackRefused,
    VersionedStore,
    delete,
    get,
    put,
)
from pftlog.ledger import GENESIS, make_batch
from pftlog.sim.harness import DelayModel, ScenarioConfig, Simulator
from pftlog.sim.scenarios import SOAK_PROFILES


def batches_of(payloads):
    out, parent = [], GENESIS
    for p in payloads:
        b = make_batch(1, parent.seq + 1, parent.digest, 0, None, p)
        out.append(b)
        parent = b
    return out


def flat_replay(batches) -> dict[bytes, bytes]:
    state, seen = {}, set()
    for b in batches:
        for txn in b.payload:
            op = KVOp.decode(txn)
            if op is None or (op.client_id, op.client_seq) in seen:
                continue
            seen.add((op.client_id, op.client_seq))
            if op.op == b"P":
                state[op.key] = op.value
            elif op.op == b"D":
                state.pop(op.key, None)
    return state


def random_payloads(rng: random.Random, count: int, batch_size=4):
    payloads, seq = [], 0
    for _ in range(count):
        txns = []
        for _ in range(rng.randint(0, batch_size)):
            seq += 1
            key = b"k%d" % rng.randrange(6)
            roll = rng.random()
            if roll < 0.6:
                txns.append(put(1, seq, key, b"v%d" % seq))
            elif roll < 0.8:
                txns.append(delete(1, seq, key))
            elif roll < 0.9:
                txns.append(get(1, seq, key))
            else:
                txns.append(b"not a kv record %d" % seq)
        payloads.append(txns)
    return payloads


def test_codec_round_trip():
    op = KVOp(b"P", 7, 9, b"key", b"value")
    assert KVOp.decode(op.encode()) == op
    assert KVOp.decode(b"garbage") is None
    assert KVOp.decode(op.encode() + b"x") is None


def test_write_lands_in_layer_one():
    store = VersionedStore()
    for b in batches_of([[]] * 4 + [[put(1, 1, b"k", b"v")]]):
        store.apply_committed(b)
    assert store.layer1[b"k"] == [(5, b"v")]
    assert store.read(b"k") == b"v"
    assert store.read(b"k", READ_AUDITED) is None


def test_last_write_in_batch_wins():
    store = VersionedStore()
    store.apply_committed(batches_of([[put(1, 1, b"k", b"a"), put(1, 2, b"k", b"b")]])[0])
    assert store.read(b"k") == b"b"
    store.advance_audit(1)
    assert store.layer2[b"k"] == b"b"


def test_gap_rejected():
    store = VersionedStore()
    with pytest.raises(KVError):
        store.apply_committed(batches_of([[], []])[1])


def test_full_and_partial_audit():
    store = VersionedStore()
    for b in batches_of([[put(1, 1, b"a", b"1")], [put(1, 2, b"b", b"2")], [put(1, 3, b"a", b"3")]]):
        store.apply_committed(b)
    store.advance_audit(2)
    assert store.layer1 == {b"a": [(3, b"3")]}
    assert store.layer2 == {b"a": b"1", b"b": b"2"}
    store.advance_audit(3)
    assert store.layer1 == {}
    with pytest.raises(KVError):
        store.advance_audit(4)


def test_rollback_rules():
    store = VersionedStore()
    for b in batches_of([[put(1, 1, b"a", b"1")], [put(1, 2, b"a", b"2")], [put(1, 3, b"b", b"3")]]):
        store.apply_committed(b)
    store.advance_audit(1)
    before = dict(store.layer2)
    store.rollback(1)
    assert store.layer1 == {}
    assert store.layer2 == before
    assert store.read(b"a") == b"1"
    with pytest.raises(RollbackRefused):
        store.rollback(0)


def test_duplicate_client_seq_applied_once():
    store = VersionedStore()
    op = put(4, 1, b"counter", b"x")
    for b in batches_of([[op, op], [op]]):
        store.apply_committed(b)
    assert store.layer1[b"counter"] == [(1, b"x")]
    assert store.seen[(4, 1)] == 1


def test_flat_replay_of_audited_prefix():
    rng = random.Random(4)
    payloads = random_payloads(rng, 250)  # roughly 1000 ops
    batches = batches_of(payloads)
    store = VersionedStore()
    audited = 0
    for b in batches:
        store.apply_committed(b)
        if rng.random() < 0.3:
            audited = rng.randint(audited, b.seq)
            store.advance_audit(audited)
            assert store.snapshot(READ_AUDITED) == flat_replay(batches[:audited])
        assert store.snapshot() == flat_replay(batches[:b.seq])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30), st.data())
def test_rollback_then_reapply_matches_flat_replay(seed, length, data):
    rng = random.Random(seed)
    first = batches_of(random_payloads(rng, length))
    audit = data.draw(st.integers(0, length))
    fork = data.draw(st.integers(audit, length))
    store = VersionedStore()
    for b in first:
        store.apply_committed(b)
    store.advance_audit(audit)
    store.rollback(fork)
    # the new branch shares the prefix up to the fork point
    tail_payloads = random_payloads(random.Random(seed + 1), rng.randint(0, 10))
    parent = first[fork - 1] if fork else GENESIS
    new_tail = []
    for p in tail_payloads:
        b = make_batch(2, parent.seq + 1, parent.digest, 0, None, p)
        new_tail.append(b)
        parent = b
    for b in new_tail:
        store.apply_committed(b)
    assert store.snapshot() == flat_replay(first[:fork] + new_tail)
    assert store.snapshot(READ_AUDITED) == flat_replay(first[:audit])


def test_replicas_agree_with_flat_replay():
    ops = [put(1, i, b"k%d" % (i % 5), b"v%d" % i) for i in range(40)]
    cfg = ScenarioConfig(SOAK_PROFILES[4], duration=1500, delays=DelayModel(delta=5), with_kv=True)
    sim = Simulator(cfg)
    for i, op in enumerate(ops):
        sim.run(until=50 + 10 * i)
        sim.submit(op)
    res = sim.run()
    assert res.report.passed
    for rep in res.replicas:
        assert all(rep.txn_seq[op] <= rep.audit_index for op in ops)
        audited = rep.branch.slice(1, rep.audit_index)
        assert rep.app.snapshot(READ_AUDITED) == flat_replay(audited)
    assert res.replicas[0].app.snapshot(READ_AUDITED) == {b"k%d" % k: b"v%d" % (35 + k) for k in range(5)}
