"""Two-layer versioned key-value store.

Committed writes land in a versioned first layer tagged with their batch
sequence number, so they can be undone when a commit is rolled back. Once a
batch is audited its writes collapse into the plain second layer, which is
never rolled back.
"""
from __future__ import annotations

from dataclasses import dataclass

from .encoding import DecodeError, Reader, Writer

MAGIC = b"KV"
PUT, GET, DELETE = b"P", b"G", b"D"
READ_COMMITTED = "committed"
READ_AUDITED = "audited"


class KVError(Exception):
    pass


class RollbackRefused(KVError):
    pass


@dataclass(frozen=True)
class KVOp:
    op: bytes
    client_id: int
    client_seq: int
    key: bytes
    value: bytes = b""

    def encode(self) -> bytes:
        w = Writer().raw(MAGIC).raw(self.op).u32(self.client_id).u64(self.client_seq)
        w.u16(len(self.key)).raw(self.key).blob(self.value)
        return w.getvalue()

    @classmethod
    def decode(cls, txn: bytes) -> KVOp | None:
        """Parse a transaction; returns None for anything that is not a KV record."""
        if not txn.startswith(MAGIC) or len(txn) < 3:
            return None
        try:
            r = Reader(txn)
            r.fixed(2)
            op = r.fixed(1)
            if op not in (PUT, GET, DELETE):
                return None
            client_id, client_seq = r.u32(), r.u64()
            key = r.fixed(r.u16())
            value = r.blob()
            r.done()
        except DecodeError:
            return None
        return cls(op, client_id, client_seq, key, value)


def put(client_id: int, client_seq: int, key: bytes, value: bytes) -> bytes:
    return KVOp(PUT, client_id, client_seq, key, value).encode()


def get(client_id: int, client_seq: int, key: bytes) -> bytes:
    return KVOp(GET, client_id, client_seq, key).encode()


def delete(client_id: int, client_seq: int, key: bytes) -> bytes:
    return KVOp(DELETE, client_id, client_seq, key).encode()


_MISSING = object()


class VersionedStore:
    def __init__(self):
        self.layer1: dict[bytes, list[tuple[int, bytes | None]]] = {}
        self.layer2: dict[bytes, bytes] = {}
        self.applied_commit_seq = 0
        self.applied_audit_seq = 0
        # (client id, client seq) -> batch seq that first applied it
        self.seen: dict[tuple[int, int], int] = {}
        self.results: dict[tuple[int, int], bytes | None] = {}

    def apply_committed(self, batch) -> VersionedStore:
        if batch.seq != self.applied_commit_seq + 1:
            raise KVError(f"expected batch {self.applied_commit_seq + 1}, got {batch.seq}")
        for txn in batch.payload or ():
            op = KVOp.decode(txn)
            if op is None:
                continue
            ident = (op.client_id, op.client_seq)
            if ident in self.seen:
                continue
            self.seen[ident] = batch.seq
            if op.op == GET:
                self.results[ident] = self.read(op.key)
                continue
            value = op.value if op.op == PUT else None
            self.layer1.setdefault(op.key, []).append((batch.seq, value))
        self.applied_commit_seq = batch.seq
        return self

    def advance_audit(self, audit_seq: int) -> VersionedStore:
        if audit_seq > self.applied_commit_seq:
            raise KVError("cannot audit beyond the applied commit index")
        if audit_seq <= self.applied_audit_seq:
            return self
        for key in list(self.layer1):
            versions = self.layer1[key]
            covered = [v for v in versions if v[0] <= audit_seq]
            if not covered:
                continue
            newest = covered[-1][1]
            if newest is None:
                self.layer2.pop(key, None)
            else:
                self.layer2[key] = newest
            rest = versions[len(covered):]
            if rest:
                self.layer1[key] = rest
            else:
                del self.layer1[key]
        self.applied_audit_seq = audit_seq
        return self

    def rollback(self, to_seq: int) -> VersionedStore:
        if to_seq < self.applied_audit_seq:
            raise RollbackRefused(
                f"rollback to {to_seq} would undo audited state up to {self.applied_audit_seq}")
        for key in list(self.layer1):
            kept = [v for v in self.layer1[key] if v[0] <= to_seq]
            if kept:
                self.layer1[key] = kept
            else:
                del self.layer1[key]
        for ident in [i for i, s in self.seen.items() if s > to_seq]:
            del self.seen[ident]
            self.results.pop(ident, None)
        self.applied_commit_seq = min(self.applied_commit_seq, to_seq)
        return self

    def read(self, key: bytes, mode: str = READ_COMMITTED) -> bytes | None:
        if mode == READ_COMMITTED:
            versions = self.layer1.get(key)
            if versions:
                return versions[-1][1]
        elif mode != READ_AUDITED:
            raise ValueError(f"unknown read mode {mode!r}")
        return self.layer2.get(key)

    def snapshot(self, mode: str = READ_COMMITTED) -> dict[bytes, bytes]:
        keys = set(self.layer2) | (set(self.layer1) if mode == READ_COMMITTED else set())
        out = {}
        for key in keys:
            value = self.read(key, mode)
            if value is not None:
                out[key] = value
        return out
