"""Transferable commit and audit receipts.

A receipt lets a client convince anyone holding the cluster's public
configuration that its transaction was committed or audited, without
talking to the cluster. Commit receipts carry a Merkle inclusion proof and
the signature of the replying replica. Audit receipts add the hash-chain
segment from the transaction's batch to the certified batch and the audit
certificates: one unanimous QC (fast path) or two same-view QCs where the
second certifies a batch embedding the first (slow path).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from .config import QuorumProfile
from .crypto import (
    DIGEST_SIZE,
    Ed25519Scheme,
    Keyring,
    MerkleProof,
    Signature,
    Signer,
    digest,
    merkle_prove,
    merkle_verify_digest,
    txn_digest,
)
from .encoding import DecodeError, Reader, Writer
from .ledger import AuditQC, Batch, read_signature, vote_message, write_signature
from .view_change import leader_of

MAGIC = b"PFTR"
RECEIPT_VERSION = 1
COMMIT_KIND = 1
AUDIT_KIND = 2
MAX_SEGMENT = 4096
MAX_SIBLINGS = 64

OK = "ok"
BAD_ENCODING = "bad-encoding"
BAD_SIGNATURE = "bad-signature"
BAD_PROOF = "bad-proof"
BROKEN_CHAIN = "broken-chain"
INSUFFICIENT_QUORUM = "insufficient-quorum"
PROFILE_MISMATCH = "profile-mismatch"

REASONS = (OK, BAD_ENCODING, BAD_SIGNATURE, BAD_PROOF, BROKEN_CHAIN, INSUFFICIENT_QUORUM, PROFILE_MISMATCH)


class ReceiptError(ValueError):
    pass


class NotReady(ReceiptError):
    """The transaction is known but not yet audited."""


def profile_digest(profile: QuorumProfile) -> bytes:
    w = Writer().u32(profile.n).u32(profile.u).u32(profile.f_safe).u32(profile.f_live)
    w.u32(profile.commit_quorum).u32(profile.audit_quorum).u32(profile.fast_quorum)
    w.flag(profile.fast_path_enabled)
    return digest(b"pftlog/profile" + w.getvalue())


@dataclass(frozen=True)
class CommitReceipt:
    txn_digest: bytes
    batch: Batch  # header only
    merkle_proof: MerkleProof
    profile_id: bytes
    signature: Signature | None = None

    kind = COMMIT_KIND

    @property
    def batch_seq(self) -> int:
        return self.batch.seq

    @property
    def batch_view(self) -> int:
        return self.batch.view

    def body(self) -> bytes:
        w = Writer()
        _write_common(w, self)
        return w.getvalue()

    def encode(self) -> bytes:
        return _seal(self.body(), self.signature)


@dataclass(frozen=True)
class AuditReceipt:
    txn_digest: bytes
    batch: Batch
    merkle_proof: MerkleProof
    profile_id: bytes
    chain_segment: tuple[Batch, ...]  # headers after ``batch``, ascending
    qcs: tuple[AuditQC, ...]
    signature: Signature | None = None

    kind = AUDIT_KIND

    @property
    def batch_seq(self) -> int:
        return self.batch.seq

    @property
    def batch_view(self) -> int:
        return self.batch.view

    @property
    def fast(self) -> bool:
        return len(self.qcs) == 1

    def body(self) -> bytes:
        w = Writer()
        _write_common(w, self)
        w.u32(len(self.chain_segment))
        for header in self.chain_segment:
            header.encode_into(w)
        w.u8(len(self.qcs))
        for qc in self.qcs:
            qc.encode_into(w)
        return w.getvalue()

    def encode(self) -> bytes:
        return _seal(self.body(), self.signature)


Receipt = CommitReceipt | AuditReceipt


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str

    def __bool__(self) -> bool:
        return self.ok


# encoding


def _write_common(w: Writer, r: Receipt) -> None:
    w.raw(MAGIC).u8(RECEIPT_VERSION).u8(r.kind)
    w.fixed(r.profile_id, DIGEST_SIZE).fixed(r.txn_digest, DIGEST_SIZE)
    r.batch.encode_into(w)
    p = r.merkle_proof
    w.u32(p.leaf_index).u32(p.leaf_count).u8(len(p.siblings))
    for sibling in p.siblings:
        w.fixed(sibling, DIGEST_SIZE)
    w.fixed(p.root, DIGEST_SIZE)


def _signing_message(body: bytes) -> bytes:
    return b"pftlog/receipt" + body


def _seal(body: bytes, signature: Signature | None) -> bytes:
    if signature is None:
        raise ReceiptError("receipt is not signed")
    w = Writer().raw(body)
    write_signature(w, signature)
    return w.getvalue()


def _read_header(r: Reader) -> Batch:
    batch = Batch.decode(r.blob(1 << 20))
    if batch.payload is not None:
        raise DecodeError("receipts carry batch headers only")
    return batch


def decode_receipt(data: bytes) -> Receipt:
    """Strict canonical decoding; any deviation raises :class:`DecodeError`."""
    r = Reader(data)
    if r.fixed(len(MAGIC)) != MAGIC:
        raise DecodeError("not a receipt")
    if r.u8() != RECEIPT_VERSION:
        raise DecodeError("unsupported receipt version")
    kind = r.u8()
    if kind not in (COMMIT_KIND, AUDIT_KIND):
        raise DecodeError(f"unknown receipt kind {kind}")
    profile_id = r.fixed(DIGEST_SIZE)
    tx = r.fixed(DIGEST_SIZE)
    batch = _read_header(r)
    index, count, nsib = r.u32(), r.u32(), r.u8()
    if nsib > MAX_SIBLINGS:
        raise DecodeError("too many Merkle siblings")
    siblings = tuple(r.fixed(DIGEST_SIZE) for _ in range(nsib))
    proof = MerkleProof(index, count, siblings, r.fixed(DIGEST_SIZE))
    if kind == COMMIT_KIND:
        receipt: Receipt = CommitReceipt(tx, batch, proof, profile_id)
    else:
        segment = tuple(_read_header(r) for _ in range(r.count(MAX_SEGMENT)))
        nqc = r.u8()
        if nqc not in (1, 2):
            raise DecodeError("audit receipts carry one or two QCs")
        qcs = tuple(AuditQC.decode_from(r) for _ in range(nqc))
        receipt = AuditReceipt(tx, batch, proof, profile_id, segment, qcs)
    signature = read_signature(r)
    r.done()
    receipt = _with_signature(receipt, signature)
    if receipt.encode() != data:
        raise DecodeError("non-canonical receipt encoding")
    return receipt


def _with_signature(receipt: Receipt, signature: Signature) -> Receipt:
    return replace(receipt, signature=signature)


# construction


def _locate(txn: bytes, batch: Batch) -> MerkleProof:
    if batch.payload is None or txn not in batch.payload:
        raise ReceiptError("transaction is not in the batch payload")
    return merkle_prove(batch.payload, batch.payload.index(txn))


def make_commit_receipt(txn: bytes, batch: Batch, signer: Signer, profile: QuorumProfile) -> CommitReceipt:
    receipt = CommitReceipt(txn_digest(txn), batch.header(), _locate(txn, batch), profile_digest(profile))
    return _with_signature(receipt, signer.sign(_signing_message(receipt.body())))


def _known_qcs(state, lo: int) -> dict[bytes, AuditQC]:
    """Certificates a replica holds for batches at or above ``lo``, fast ones preferred."""
    found: dict[bytes, AuditQC] = {}

    def keep(qc):
        if qc is None or qc.batch_seq < lo:
            return
        have = found.get(qc.batch_digest)
        if have is None or (qc.fast and not have.fast):
            found[qc.batch_digest] = qc

    for x in state.branch.slice(lo):
        keep(x.audit_qc)
    for ev in state.evidence:
        for qc in ev.qcs:
            keep(qc)
    for qc in getattr(state, "formed_qcs", {}).values():
        keep(qc)
    return found


def _shortest_evidence(state, batch: Batch) -> tuple[AuditQC, ...] | None:
    """The nearest certificates above ``batch`` that prove it audited."""
    qcs = _known_qcs(state, batch.seq)
    chain = state.branch.slice(batch.seq, state.branch.tip.seq)
    carriers: dict[bytes, list[Batch]] = {}
    for x in chain:
        if x.audit_qc is not None:
            carriers.setdefault(x.audit_qc.batch_digest, []).append(x)
    fast_ok = state.profile.fast_path_enabled
    for x in chain:
        qc = qcs.get(x.digest)
        if qc is not None and qc.fast and fast_ok and not x.new_view:
            return (qc,)
        for carrier in carriers.get(x.digest, ()):
            outer = qcs.get(carrier.digest)
            if outer is not None and outer.view == carrier.audit_qc.view:
                return (carrier.audit_qc, outer)
    return None


def make_audit_receipt(txn: bytes, batch: Batch, state) -> AuditReceipt:
    """Build an audit receipt from the certificates a replica holds.

    ``state`` is a replica: its branch, audit evidence, batch store, signer
    and profile supply the certificates, headers and signature. The receipt
    uses the nearest certificates above the batch, which keeps the chain
    segment short.
    """
    proof = _locate(txn, batch)
    if state.audit_index < batch.seq or not state.branch.contains(batch.digest):
        raise NotReady(f"batch {batch.seq} is not audited yet")
    qcs = _shortest_evidence(state, batch)
    if qcs is None:
        evidence = next((e for e in state.evidence if e.audited_seq >= batch.seq), None)
        if evidence is None:
            raise NotReady(f"no audit evidence covers batch {batch.seq}")
        qcs = tuple(evidence.qcs)
    carrier = qcs[-1].batch_digest
    chain = state.store.chain_down(carrier, stop_seq=batch.seq)
    chain.reverse()
    if not chain and carrier != batch.digest or chain and chain[0].parent != batch.digest:
        raise ReceiptError("evidence does not extend the transaction's batch")
    segment = tuple(b.header() for b in chain)
    receipt = AuditReceipt(txn_digest(txn), batch.header(), proof, profile_digest(state.profile),
                           segment, qcs)
    return _with_signature(receipt, state.signer.sign(_signing_message(receipt.body())))


# verification


def _keyring(public_keys) -> Keyring:
    if isinstance(public_keys, Keyring):
        return public_keys
    if isinstance(public_keys, dict):
        return Keyring(public_keys, Ed25519Scheme)
    return Keyring(dict(enumerate(public_keys)), Ed25519Scheme)


def _check_qc(qc: AuditQC, profile: QuorumProfile, keys: Keyring) -> str:
    signers = [s.signer for s in qc.votes]
    if any(s >= profile.n for s in signers) or len(signers) > profile.n:
        return PROFILE_MISMATCH
    if len(signers) < profile.audit_quorum or qc.view == 0:
        return INSUFFICIENT_QUORUM
    if qc.fast != (len(signers) == profile.fast_quorum):
        return INSUFFICIENT_QUORUM
    message = vote_message(qc.view, qc.batch_seq, qc.batch_digest)
    if not all(keys.verify(message, sig) for sig in qc.votes):
        return BAD_SIGNATURE
    return OK


def _check_header_sig(batch: Batch, profile: QuorumProfile, keys: Keyring) -> bool:
    sig = batch.leader_sig
    if sig is None:
        return True
    return sig.signer == leader_of(batch.view, profile.n) and keys.verify(batch.signing_bytes, sig)


def verify_receipt(receipt, profile: QuorumProfile, public_keys) -> Verdict:
    """Check a receipt using only the public profile and replica keys."""
    if isinstance(receipt, (bytes, bytearray)):
        try:
            receipt = decode_receipt(bytes(receipt))
        except (DecodeError, ValueError):
            return Verdict(False, BAD_ENCODING)
    keys = _keyring(public_keys)
    reason = _verify(receipt, profile, keys)
    return Verdict(reason == OK, reason)


def _verify(receipt: Receipt, profile: QuorumProfile, keys: Keyring) -> str:
    if receipt.profile_id != profile_digest(profile):
        return PROFILE_MISMATCH
    sig = receipt.signature
    if sig is None or sig.signer >= profile.n:
        return BAD_SIGNATURE
    if not keys.verify(_signing_message(receipt.body()), sig):
        return BAD_SIGNATURE
    batch = receipt.batch
    proof = receipt.merkle_proof
    if proof.leaf_count != batch.payload_count or proof.root != batch.payload_root:
        return BAD_PROOF
    if not merkle_verify_digest(proof, receipt.txn_digest):
        return BAD_PROOF
    if not _check_header_sig(batch, profile, keys):
        return BAD_SIGNATURE
    if isinstance(receipt, CommitReceipt):
        return OK
    return _verify_audit(receipt, profile, keys)


def _verify_audit(receipt: AuditReceipt, profile: QuorumProfile, keys: Keyring) -> str:
    chain = (receipt.batch,) + receipt.chain_segment
    for prev, cur in zip(chain, chain[1:]):
        if cur.parent != prev.digest or cur.seq != prev.seq + 1:
            return BROKEN_CHAIN
        if not _check_header_sig(cur, profile, keys):
            return BAD_SIGNATURE
    tip = chain[-1]
    qcs = receipt.qcs
    for qc in qcs:
        status = _check_qc(qc, profile, keys)
        if status != OK:
            return status
    last = qcs[-1]
    if last.batch_digest != tip.digest or last.batch_seq != tip.seq:
        return BROKEN_CHAIN
    if len(qcs) == 1:
        if not last.fast or not profile.fast_path_enabled or tip.new_view:
            return INSUFFICIENT_QUORUM
        return OK
    first = qcs[0]
    if first.view != last.view or tip.audit_qc != first:
        return BROKEN_CHAIN
    positions = {b.digest: b for b in chain}
    audited = positions.get(first.batch_digest)
    if audited is None or audited.seq != first.batch_seq:
        return BROKEN_CHAIN
    return OK
