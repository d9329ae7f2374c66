from __future__ import annotations

import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pftlog.crypto import Signature, make_keys
from pftlog.encoding import DecodeError
from pftlog.ledger import (
    GENESIS,
    AuditQC,
    Batch,
    BatchStore,
    Branch,
    ConflictError,
    LedgerError,
    UnknownAncestry,
    canonical_decode,
    canonical_encode,
    conflicts,
    is_ancestor,
    make_audit_qc,
    make_batch,
)

SIGNERS, KEYS = make_keys(4)


def chain(n: int, base: Batch = GENESIS, view: int = 1, tag: bytes = b"") -> list[Batch]:
    out, parent = [], base
    for i in range(n):
        b = make_batch(view, parent.seq + 1, parent.digest, 0, None, [tag + b"%d" % i])
        out.append(b)
        parent = b
    return out


def random_batch(rng: random.Random) -> Batch:
    qc = None
    if rng.random() < 0.5:
        sigs = [Signature(i, rng.randbytes(64)) for i in sorted(rng.sample(range(7), rng.randint(0, 7)))]
        qc = AuditQC(rng.randbytes(64), rng.randrange(1 << 40), rng.randrange(1 << 20), tuple(sigs), rng.random() < 0.5)
    payload = [rng.randbytes(rng.randrange(0, 30)) for _ in range(rng.randrange(0, 5))]
    signer = SIGNERS[rng.randrange(4)] if rng.random() < 0.5 else None
    return make_batch(rng.randrange(1 << 30), rng.randrange(1, 1 << 40), rng.randbytes(64),
                      rng.randrange(1 << 30), qc, payload, rng.random() < 0.2, signer)


def test_encode_is_deterministic():
    b = random_batch(random.Random(1))
    assert canonical_encode(b) == canonical_encode(b)


def test_random_round_trip():
    rng = random.Random(11)
    for _ in range(10_000):
        b = random_batch(rng)
        back = canonical_decode(canonical_encode(b))
        assert back == b
        assert back.digest == b.digest
        assert back.header().encode() == b.header().encode()


def test_header_round_trip_keeps_digest():
    b = random_batch(random.Random(2))
    h = canonical_decode(canonical_encode(b.header()))
    assert h.payload is None
    assert h.digest == b.digest


def test_every_field_changes_digest():
    base = make_batch(3, 7, bytes(64), 5, make_audit_qc(GENESIS, 2, [SIGNERS[0].sign(b"x")], False),
                      [b"a", b"b"], False, SIGNERS[1])
    qc = base.audit_qc
    variants = {
        "view": replace(base, view=4),
        "seq": replace(base, seq=8),
        "parent": replace(base, parent=b"\x01" * 64),
        "commit_index": replace(base, commit_index=6),
        "audit_qc": replace(base, audit_qc=None),
        "audit_qc.view": replace(base, audit_qc=replace(qc, view=3)),
        "audit_qc.fast": replace(base, audit_qc=replace(qc, fast=True)),
        "audit_qc.votes": replace(base, audit_qc=replace(qc, votes=())),
        "payload_count": replace(base, payload_count=3),
        "payload_root": replace(base, payload_root=b"\x02" * 64),
        "new_view": replace(base, new_view=True),
        "leader_sig": replace(base, leader_sig=None),
    }
    for name, variant in variants.items():
        assert variant.digest != base.digest, name


def test_payload_mismatch_rejected_on_decode():
    b = make_batch(1, 1, GENESIS.digest, 0, None, [b"a"])
    bad = replace(b, payload=(b"b",))
    with pytest.raises(DecodeError):
        canonical_decode(bad.encode())


def test_signature_check():
    b = make_batch(1, 1, GENESIS.digest, 0, None, [b"a"], signer=SIGNERS[1])
    assert b.signature_valid(KEYS, 1)
    assert not b.signature_valid(KEYS, 2)
    assert not replace(b, commit_index=9).signature_valid(KEYS, 1)


def test_qc_decode_rejects_unsorted_votes():
    qc = AuditQC(bytes(64), 1, 1, (Signature(2, b"x"), Signature(1, b"y")))
    with pytest.raises(DecodeError):
        AuditQC.decode(qc.encode())


def test_ancestry_examples():
    a, b, c = chain(3)
    store = BatchStore([a, b, c])
    assert is_ancestor(a, c, store)
    assert is_ancestor(b, b, store)
    assert not is_ancestor(c, a, store)
    b2 = make_batch(1, 2, a.digest, 0, None, [b"other"])
    store.add(b2)
    assert not is_ancestor(b, b2, store)
    assert conflicts(b, b2, store)
    assert not conflicts(a, c, store)


def test_ancestry_missing_link():
    a, b, c = chain(3)
    store = BatchStore([a, c])
    with pytest.raises(UnknownAncestry) as info:
        is_ancestor(a, c, store)
    assert info.value.missing == b.digest


def test_ancestry_matches_transitive_closure():
    rng = random.Random(5)
    for trial in range(20):
        batches = [GENESIS]
        for i in range(20):
            parent = rng.choice(batches)
            batches.append(make_batch(1, parent.seq + 1, parent.digest, 0, None, [b"%d-%d" % (trial, i)]))
        store = BatchStore(batches)
        # brute-force reachability over the parent relation
        reach = {b.digest: {b.digest} for b in batches}
        changed = True
        while changed:
            changed = False
            for b in batches:
                if b.seq == 0:
                    continue
                extra = reach[b.parent] - reach[b.digest]
                if extra:
                    reach[b.digest] |= extra
                    changed = True
        for x in batches:
            for y in batches:
                assert is_ancestor(x, y, store) == (x.digest in reach[y.digest])
                assert conflicts(x, y, store) == (x.digest not in reach[y.digest] and y.digest not in reach[x.digest])


def test_extend_direct_child_and_grandchild():
    a, b, c = chain(3)
    store = BatchStore()
    branch = Branch(store)
    branch.extend(a)
    assert branch.tip == a
    store.add(b)
    branch.extend(c)
    assert branch.tip.seq == 3
    assert [x.seq for x in branch] == [0, 1, 2, 3]


def test_extend_unknown_parent():
    a, b, c = chain(3)
    branch = Branch(BatchStore([a]), a)
    with pytest.raises(UnknownAncestry):
        branch.extend(c)


def test_extend_conflicting_sibling():
    a, b = chain(2)
    store = BatchStore([a, b])
    branch = Branch(store, b)
    sibling = make_batch(2, 2, a.digest, 0, None, [b"fork"])
    with pytest.raises(ConflictError):
        branch.extend(sibling)


def test_rollback():
    batches = chain(5)
    branch = Branch(BatchStore(batches), batches[-1])
    _, removed = branch.rollback_to(batches[-1].digest)
    assert removed == []
    _, removed = branch.rollback_to(batches[1].digest)
    assert [b.seq for b in removed] == [5, 4, 3]
    assert branch.tip == batches[1]
    with pytest.raises(LedgerError):
        branch.rollback_to(batches[4].digest)


def test_fork_point():
    batches = chain(4)
    store = BatchStore(batches)
    branch = Branch(store, batches[-1])
    fork = chain(3, batches[1], view=2, tag=b"f")
    for b in fork:
        store.add(b)
    base, path = branch.fork_point(fork[-1])
    assert base == batches[1]
    assert path == fork


@settings(max_examples=50, deadline=None)
@given(st.lists(st.binary(max_size=8), max_size=10), st.integers(0, 1 << 20), st.booleans())
def test_decode_encode_property(payload, view, new_view):
    b = make_batch(view, 1, GENESIS.digest, 0, None, payload, new_view)
    assert canonical_decode(canonical_encode(b)) == b
    assert b.payload_valid()
