"""Batches, quorum certificates and hash-chained branches."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

from .crypto import (
    DIGEST_SIZE,
    ZERO_DIGEST,
    Keyring,
    Signature,
    Signer,
    digest,
    merkle_root,
)
from .encoding import DecodeError, Reader, Writer

FORMAT_VERSION = 1
EMPTY_ROOT = digest(b"")
MAX_SIG_SIZE = 128


class LedgerError(Exception):
    pass


class UnknownAncestry(LedgerError):
    """A batch needed to decide ancestry is missing from the store."""

    def __init__(self, missing: bytes):
        self.missing = missing
        super().__init__(f"missing batch {missing.hex()[:16]}")


class ConflictError(LedgerError):
    pass


def write_signature(w: Writer, sig: Signature) -> None:
    w.u32(sig.signer).blob(sig.sig)


def read_signature(r: Reader) -> Signature:
    return Signature(r.u32(), r.blob(MAX_SIG_SIZE))


def vote_message(view: int, seq: int, batch_digest: bytes) -> bytes:
    """Bytes a replica signs when it votes for a batch."""
    return b"pftlog/vote" + Writer().u64(view).u64(seq).raw(batch_digest).getvalue()


@dataclass(frozen=True)
class CommitQC:
    batch_digest: bytes
    batch_seq: int
    view: int
    voters: frozenset[int]


@dataclass(frozen=True)
class AuditQC:
    batch_digest: bytes
    batch_seq: int
    view: int
    votes: tuple[Signature, ...]  # sorted by signer
    fast: bool = False

    @property
    def voters(self) -> frozenset[int]:
        return frozenset(s.signer for s in self.votes)

    @property
    def rank(self) -> tuple[int, int, bool]:
        return (self.view, self.batch_seq, self.fast)

    def encode_into(self, w: Writer) -> None:
        w.fixed(self.batch_digest, DIGEST_SIZE).u64(self.batch_seq).u64(self.view)
        w.flag(self.fast).u32(len(self.votes))
        for sig in self.votes:
            write_signature(w, sig)

    @classmethod
    def decode_from(cls, r: Reader) -> AuditQC:
        batch_digest = r.fixed(DIGEST_SIZE)
        seq, view = r.u64(), r.u64()
        fast = r.flag()
        votes = tuple(read_signature(r) for _ in range(r.count(4096)))
        for a, b in zip(votes, votes[1:]):
            if a.signer >= b.signer:
                raise DecodeError("QC votes must be sorted by distinct signer")
        return cls(batch_digest, seq, view, votes, fast)

    def encode(self) -> bytes:
        w = Writer()
        self.encode_into(w)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> AuditQC:
        r = Reader(data)
        qc = cls.decode_from(r)
        r.done()
        return qc


def make_audit_qc(batch: Batch, view: int, sigs, fast: bool) -> AuditQC:
    ordered = tuple(sorted(sigs, key=lambda s: s.signer))
    return AuditQC(batch.digest, batch.seq, view, ordered, fast)


@dataclass(frozen=True, eq=False)
class Batch:
    """One log entry.

    ``payload`` is ``None`` for header-only copies (receipts, view-change
    summaries); the digest covers only the header, which commits to the
    payload through ``payload_count`` and ``payload_root``.
    """

    view: int
    seq: int
    parent: bytes
    commit_index: int
    audit_qc: AuditQC | None
    payload_count: int
    payload_root: bytes
    new_view: bool = False
    leader_sig: Signature | None = None
    payload: tuple[bytes, ...] | None = field(default=None, repr=False)

    def _header(self, with_sig: bool) -> bytes:
        w = Writer()
        w.u64(self.view).u64(self.seq).fixed(self.parent, DIGEST_SIZE).u64(self.commit_index)
        w.flag(self.audit_qc is not None)
        if self.audit_qc is not None:
            self.audit_qc.encode_into(w)
        w.u32(self.payload_count).fixed(self.payload_root, DIGEST_SIZE)
        w.flag(self.new_view)
        has_sig = with_sig and self.leader_sig is not None
        w.flag(has_sig)
        if has_sig:
            write_signature(w, self.leader_sig)
        return w.getvalue()

    @cached_property
    def header_bytes(self) -> bytes:
        return self._header(True)

    @cached_property
    def signing_bytes(self) -> bytes:
        return b"pftlog/batch" + self._header(False)

    @cached_property
    def digest(self) -> bytes:
        return digest(bytes([FORMAT_VERSION]) + self.header_bytes)

    def __eq__(self, other):
        if not isinstance(other, Batch):
            return NotImplemented
        return self.digest == other.digest and self.payload == other.payload

    def __hash__(self):
        return hash(self.digest)

    def header(self) -> Batch:
        if self.payload is None:
            return self
        return replace(self, payload=None)

    def with_signature(self, signer: Signer) -> Batch:
        return replace(self, leader_sig=signer.sign(self.signing_bytes))

    def signature_valid(self, keyring: Keyring, leader: int) -> bool:
        sig = self.leader_sig
        return sig is not None and sig.signer == leader and keyring.verify(self.signing_bytes, sig)

    def payload_valid(self) -> bool:
        if self.payload is None:
            return False
        if len(self.payload) != self.payload_count:
            return False
        return compute_root(self.payload) == self.payload_root

    def encode(self) -> bytes:
        """Canonical encoding, including the payload when present."""
        w = Writer().u8(FORMAT_VERSION).raw(self.header_bytes)
        w.flag(self.payload is not None)
        if self.payload is not None:
            w.u32(len(self.payload))
            for txn in self.payload:
                w.blob(txn)
        return w.getvalue()

    def encode_into(self, w: Writer) -> None:
        w.blob(self.encode())

    @classmethod
    def decode_from(cls, r: Reader) -> Batch:
        version = r.u8()
        if version != FORMAT_VERSION:
            raise DecodeError(f"unsupported batch format {version}")
        view, seq = r.u64(), r.u64()
        parent = r.fixed(DIGEST_SIZE)
        commit_index = r.u64()
        audit_qc = AuditQC.decode_from(r) if r.flag() else None
        payload_count = r.u32()
        payload_root = r.fixed(DIGEST_SIZE)
        new_view = r.flag()
        leader_sig = read_signature(r) if r.flag() else None
        payload = None
        if r.flag():
            payload = tuple(r.blob() for _ in range(r.count()))
        batch = cls(view, seq, parent, commit_index, audit_qc, payload_count,
                    payload_root, new_view, leader_sig, payload)
        if payload is not None and not batch.payload_valid():
            raise DecodeError("payload does not match its root")
        return batch

    @classmethod
    def decode(cls, data: bytes) -> Batch:
        r = Reader(data)
        batch = cls.decode_from(r)
        r.done()
        return batch


def canonical_encode(batch: Batch) -> bytes:
    return batch.encode()


def canonical_decode(data: bytes) -> Batch:
    return Batch.decode(data)


def compute_root(payload) -> bytes:
    return merkle_root(list(payload)) if payload else EMPTY_ROOT


def make_batch(view: int, seq: int, parent: bytes, commit_index: int,
               audit_qc: AuditQC | None, payload=(), new_view: bool = False,
               signer: Signer | None = None) -> Batch:
    payload = tuple(payload)
    batch = Batch(view, seq, parent, commit_index, audit_qc, len(payload),
                  compute_root(payload), new_view, None, payload)
    if signer is not None:
        batch = batch.with_signature(signer)
    return batch


GENESIS = make_batch(0, 0, ZERO_DIGEST, 0, None)
GENESIS_QC = AuditQC(GENESIS.digest, 0, 0, (), False)


def is_signed_seq(seq: int, signing_interval: int) -> bool:
    return seq % signing_interval == 0


@dataclass(frozen=True)
class Vote:
    """A replica's response to an append-entry.

    ``sigs`` holds ``(seq, signature)`` for every signed batch of the vote's
    view between the voter's audit index and ``batch_seq``.
    """

    view: int
    batch_digest: bytes
    batch_seq: int
    voter: int
    sigs: tuple[tuple[int, Signature], ...] = ()


class BatchStore:
    """Every batch a replica has seen, keyed by digest."""

    def __init__(self, batches=()):
        self._by_digest: dict[bytes, Batch] = {}
        self.add(GENESIS)
        for batch in batches:
            self.add(batch)

    def add(self, batch: Batch) -> bool:
        """Insert ``batch``; returns False if it was already known.

        A full copy replaces a header-only one so payloads can be served.
        """
        known = self._by_digest.get(batch.digest)
        if known is not None and (known.payload is not None or batch.payload is None):
            return False
        self._by_digest[batch.digest] = batch
        return known is None

    def get(self, batch_digest: bytes) -> Batch | None:
        return self._by_digest.get(batch_digest)

    def __getitem__(self, batch_digest: bytes) -> Batch:
        try:
            return self._by_digest[batch_digest]
        except KeyError:
            raise UnknownAncestry(batch_digest) from None

    def __contains__(self, batch_digest: bytes) -> bool:
        return batch_digest in self._by_digest

    def __len__(self) -> int:
        return len(self._by_digest)

    def __iter__(self):
        return iter(self._by_digest.values())

    def chain_down(self, start: bytes, stop_seq: int = -1, limit: int | None = None) -> list[Batch]:
        """Batches from ``start`` downward while ``seq > stop_seq``, as far as known."""
        out = []
        batch = self._by_digest.get(start)
        while batch is not None and batch.seq > stop_seq:
            out.append(batch)
            if limit is not None and len(out) >= limit or batch.seq == 0:
                break
            batch = self._by_digest.get(batch.parent)
        return out


def is_ancestor(a: Batch, d: Batch, store: BatchStore) -> bool:
    """True iff ``a`` is reachable from ``d`` through parent links (reflexive)."""
    cur = d
    while cur.seq > a.seq:
        cur = store[cur.parent]
    return cur.digest == a.digest


def conflicts(a: Batch, b: Batch, store: BatchStore) -> bool:
    return not (is_ancestor(a, b, store) or is_ancestor(b, a, store))


class Branch:
    """The local chain from genesis (or a retained base) to the tip.

    Mutated in place by the owning replica; ``extend`` and ``rollback_to``
    return the branch for chaining.
    """

    def __init__(self, store: BatchStore, tip: Batch = GENESIS):
        self.store = store
        chain = [tip]
        while chain[-1].seq > 0:
            chain.append(store[chain[-1].parent])
        chain.reverse()
        self._chain: list[Batch] = chain
        self._pos: dict[bytes, int] = {b.digest: b.seq for b in chain}

    @property
    def tip(self) -> Batch:
        return self._chain[-1]

    def __len__(self) -> int:
        return len(self._chain)

    def at(self, seq: int) -> Batch | None:
        if 0 <= seq < len(self._chain):
            return self._chain[seq]
        return None

    def contains(self, batch_digest: bytes) -> bool:
        return batch_digest in self._pos

    def slice(self, lo: int, hi: int | None = None) -> list[Batch]:
        """Batches with ``lo <= seq <= hi``."""
        hi = self.tip.seq if hi is None else hi
        return self._chain[max(lo, 0):hi + 1]

    def path_from(self, batch: Batch) -> list[Batch]:
        """Batches between the tip (exclusive) and ``batch`` (inclusive), ascending.

        Raises :class:`UnknownAncestry` if a link is missing and
        :class:`ConflictError` if ``batch`` does not descend from the tip.
        """
        tip = self.tip
        path = []
        cur = batch
        while cur.seq > tip.seq:
            path.append(cur)
            cur = self.store[cur.parent]
        if cur.digest != tip.digest:
            raise ConflictError(f"batch at seq {batch.seq} conflicts with tip {tip.seq}")
        path.reverse()
        return path

    def fork_point(self, batch: Batch) -> tuple[Batch, list[Batch]]:
        """Highest branch batch that ``batch`` descends from, plus the path above it."""
        path = []
        cur = batch
        while cur.digest not in self._pos:
            path.append(cur)
            if cur.seq == 0:
                raise ConflictError("batch does not share genesis")
            cur = self.store[cur.parent]
        path.reverse()
        return cur, path

    def extend(self, batch: Batch) -> Branch:
        for b in self.path_from(batch):
            self.append(b)
        return self

    def append(self, batch: Batch) -> None:
        if batch.parent != self.tip.digest or batch.seq != self.tip.seq + 1:
            raise ConflictError("batch does not link to the tip")
        self.store.add(batch)
        self._chain.append(batch)
        self._pos[batch.digest] = batch.seq

    def rollback_to(self, ancestor_digest: bytes) -> tuple[Branch, list[Batch]]:
        seq = self._pos.get(ancestor_digest)
        if seq is None:
            raise LedgerError("rollback target is not on the branch")
        removed = self._chain[seq + 1:]
        del self._chain[seq + 1:]
        for b in removed:
            del self._pos[b.digest]
        removed.reverse()
        return self, removed

    def __iter__(self):
        return iter(self._chain)
