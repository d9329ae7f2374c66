"""Append-only durable log of a replica's protocol state.

The log is a sequence of frames in the wire format with record types of its
own: full batches on the local branch, audit evidence, and snapshots of the
scalar protocol fields. A side file indexes every ``INDEX_EVERY``-th record
by byte offset; recovery checks the index against the frames it replays.

A torn final record (a crash mid-write) is truncated on open. Damage
anywhere else is fatal.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

from ..encoding import DecodeError, Reader, Writer
from ..ledger import GENESIS, AuditQC, Batch, BatchStore, Branch
from ..replica import AuditEvidence, NORMAL, VIEW_CHANGE, Replica
from .wire import NeedMoreBytes, ProtocolError, pack_frame, unpack_frame

BATCH_RECORD = 0x40
STATE_RECORD = 0x41
EVIDENCE_RECORD = 0x42

INDEX_EVERY = 64
_INDEX_ENTRY = struct.Struct(">QQ")  # record number, byte offset

LOG_NAME = "replica.log"
INDEX_NAME = "replica.idx"


class CorruptLog(Exception):
    pass


@dataclass(frozen=True)
class StateRecord:
    v_curr: int
    phase: str
    nv_view: int
    voted_seq: int
    vc_sent: int
    commit_index: int
    high_commit_index: int
    audit_index: int
    view_stable: bool
    first_commit_seq: int
    consecutive_failures: int
    tip: bytes
    high_qc: AuditQC

    @classmethod
    def of(cls, r: Replica) -> StateRecord:
        return cls(r.v_curr, r.phase, r.nv_view, r.voted_seq, r.vc_sent, r.commit_index,
                   r.high_commit_index, r.audit_index, r.view_stable, r.first_commit_seq,
                   r.consecutive_failures, r.branch.tip.digest, r.high_qc)

    def encode(self) -> bytes:
        w = Writer().u64(self.v_curr).flag(self.phase == NORMAL)
        # -1 is the "never" sentinel for these two
        w.u64(self.nv_view + 1).u64(self.voted_seq).u64(self.vc_sent + 1)
        w.u64(self.commit_index).u64(self.high_commit_index).u64(self.audit_index)
        w.flag(self.view_stable).u64(self.first_commit_seq).u32(self.consecutive_failures)
        w.fixed(self.tip, len(self.tip))
        self.high_qc.encode_into(w)
        return w.getvalue()

    @classmethod
    def decode(cls, body: bytes) -> StateRecord:
        r = Reader(body)
        v_curr = r.u64()
        phase = NORMAL if r.flag() else VIEW_CHANGE
        nv_view, voted, vc_sent = r.u64() - 1, r.u64(), r.u64() - 1
        commit, high_commit, audit = r.u64(), r.u64(), r.u64()
        stable, first, failures = r.flag(), r.u64(), r.u32()
        tip = r.fixed(len(GENESIS.digest))
        qc = AuditQC.decode_from(r)
        r.done()
        return cls(v_curr, phase, nv_view, voted, vc_sent, commit, high_commit, audit,
                   stable, first, failures, tip, qc)


def encode_evidence(ev: AuditEvidence) -> bytes:
    w = Writer().u64(ev.audited_seq).u64(ev.carrier_seq).u32(len(ev.qcs))
    for qc in ev.qcs:
        qc.encode_into(w)
    return w.getvalue()


def decode_evidence(body: bytes) -> AuditEvidence:
    r = Reader(body)
    audited, carrier = r.u64(), r.u64()
    qcs = tuple(AuditQC.decode_from(r) for _ in range(r.count(2)))
    r.done()
    return AuditEvidence(audited, qcs, carrier)


@dataclass
class Recovered:
    batches: list[Batch]
    evidence: list[AuditEvidence]
    state: StateRecord | None
    records: int


class DurableLog:
    def __init__(self, directory: str | os.PathLike, fsync: bool = True):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = self.dir / LOG_NAME
        self.index_path = self.dir / INDEX_NAME
        self.fsync = fsync
        self.recovered = self._scan()
        self.records = self.recovered.records
        self._fh = open(self.path, "ab")
        self._idx = open(self.index_path, "ab")
        self._pending: list[bytes] = []
        self._persisted: set[bytes] = {b.digest for b in self.recovered.batches}
        self._evidence_count = len(self.recovered.evidence)
        self._last_state = self.recovered.state

    # reading

    def _scan(self) -> Recovered:
        data = self.path.read_bytes() if self.path.exists() else b""
        batches: list[Batch] = []
        evidence: list[AuditEvidence] = []
        state = None
        offsets: dict[int, int] = {}
        pos = count = 0
        while pos < len(data):
            try:
                ftype, body, end = unpack_frame(data, pos)
            except NeedMoreBytes:
                break
            except ProtocolError as exc:
                if self._is_tail(data, pos):
                    break
                raise CorruptLog(f"{self.path}: bad record at offset {pos}: {exc}") from None
            try:
                if ftype == BATCH_RECORD:
                    batches.append(Batch.decode(body))
                elif ftype == EVIDENCE_RECORD:
                    evidence.append(decode_evidence(body))
                elif ftype == STATE_RECORD:
                    state = StateRecord.decode(body)
                else:
                    raise CorruptLog(f"{self.path}: unknown record type {ftype} at offset {pos}")
            except DecodeError as exc:
                raise CorruptLog(f"{self.path}: undecodable record at offset {pos}: {exc}") from None
            offsets[count] = pos
            count += 1
            pos = end
        if pos < len(data):
            with open(self.path, "r+b") as fh:
                fh.truncate(pos)
        self._check_index(offsets, count)
        return Recovered(batches, evidence, state, count)

    @staticmethod
    def _is_tail(data: bytes, pos: int) -> bool:
        """Whether the damaged record at ``pos`` is the last thing in the file."""
        try:
            _, _, end = unpack_frame(data, pos)
        except NeedMoreBytes:
            return True
        except ProtocolError:
            # the header itself may be damaged; only accept a short remainder
            return len(data) - pos <= 64 or _declared_end(data, pos) >= len(data)
        return end >= len(data)

    def _check_index(self, offsets: dict[int, int], count: int) -> None:
        raw = self.index_path.read_bytes() if self.index_path.exists() else b""
        keep = 0
        for pos in range(0, len(raw) - len(raw) % _INDEX_ENTRY.size, _INDEX_ENTRY.size):
            rec, off = _INDEX_ENTRY.unpack_from(raw, pos)
            if rec >= count:
                break
            if offsets.get(rec) != off:
                raise CorruptLog(f"{self.index_path}: record {rec} indexed at {off}, found at {offsets.get(rec)}")
            keep = pos + _INDEX_ENTRY.size
        if keep != len(raw):
            with open(self.index_path, "r+b") as fh:
                fh.truncate(keep)

    # writing

    def _add(self, ftype: int, body: bytes) -> None:
        self._pending.append(pack_frame(ftype, body))

    def stage(self, replica: Replica) -> bool:
        """Queue records for whatever changed in ``replica``; True if anything did."""
        fresh = []
        for batch in reversed(replica.branch.slice(1)):
            if batch.digest in self._persisted:
                break
            fresh.append(batch)
        for batch in reversed(fresh):
            self._add(BATCH_RECORD, batch.encode())
            self._persisted.add(batch.digest)
        for ev in replica.evidence[self._evidence_count:]:
            self._add(EVIDENCE_RECORD, encode_evidence(ev))
        self._evidence_count = len(replica.evidence)
        state = StateRecord.of(replica)
        if state != self._last_state:
            self._add(STATE_RECORD, state.encode())
            self._last_state = state
        return bool(self._pending)

    def flush(self) -> None:
        if not self._pending:
            return
        offset = self._fh.tell()
        index = []
        for frame in self._pending:
            if self.records % INDEX_EVERY == 0:
                index.append(_INDEX_ENTRY.pack(self.records, offset))
            offset += len(frame)
            self.records += 1
        self._fh.write(b"".join(self._pending))
        self._pending.clear()
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())
        if index:
            self._idx.write(b"".join(index))
            self._idx.flush()

    def persist(self, replica: Replica) -> None:
        self.stage(replica)
        self.flush()

    def close(self) -> None:
        self.flush()
        self._fh.close()
        self._idx.close()

    # recovery

    def restore(self, replica: Replica) -> bool:
        """Load durable state into a freshly built replica; False for an empty log."""
        rec = self.recovered
        if rec.state is None:
            return False
        store = BatchStore(rec.batches)
        try:
            tip = store[rec.state.tip]
            branch = Branch(store, tip)
        except Exception as exc:
            raise CorruptLog(f"{self.path}: branch tip is not reconstructible: {exc}") from None
        s = rec.state
        replica.store = store
        replica.branch = branch
        for name in ("v_curr", "phase", "nv_view", "voted_seq", "vc_sent", "commit_index",
                     "high_commit_index", "audit_index", "view_stable", "first_commit_seq",
                     "consecutive_failures", "high_qc"):
            setattr(replica, name, getattr(s, name))
        replica.evidence = list(rec.evidence)
        replica.txn_seq = {}
        for batch in branch:
            for txn in batch.payload or ():
                replica.txn_seq.setdefault(txn, batch.seq)
        replica.app_commit_seq = 0
        replica._apply_app()
        return True


def _declared_end(data: bytes, pos: int) -> int:
    if len(data) - pos < 10:
        return len(data)
    (length,) = struct.unpack_from(">I", data, pos + 6)
    return pos + 10 + length + 4
