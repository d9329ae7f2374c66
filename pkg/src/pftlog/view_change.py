"""View-change messages, proof validation and deterministic branch selection."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from functools import cached_property

from .config import QuorumProfile
from .crypto import DIGEST_SIZE, Keyring, Signature, Signer
from .encoding import Reader, Writer
from .ledger import (
    GENESIS_QC,
    AuditQC,
    Batch,
    is_signed_seq,
    read_signature,
    vote_message,
    write_signature,
)

STANDARD_RULES = "standard"
RELAXED_RULES = "relaxed"


class InsufficientProof(ValueError):
    pass


def leader_of(view: int, n: int) -> int:
    return view % n


@dataclass(frozen=True, eq=False)
class ViewChangeMsg:
    """Sent by a replica abandoning ``view``; the target view is ``view + 1``.

    ``suffix`` runs from the batch certified by ``high_qc`` up to the sender's
    tip, inclusive at both ends.
    """

    view: int
    sender: int
    high_qc: AuditQC
    suffix: tuple[Batch, ...]
    sig: Signature | None = None

    @property
    def tip(self) -> Batch:
        return self.suffix[-1]

    @cached_property
    def signing_bytes(self) -> bytes:
        w = Writer().raw(b"pftlog/view-change").u64(self.view).u32(self.sender)
        self.high_qc.encode_into(w)
        w.u32(len(self.suffix))
        for batch in self.suffix:
            w.raw(batch.digest)
        return w.getvalue()

    def signed(self, signer: Signer) -> ViewChangeMsg:
        return ViewChangeMsg(self.view, self.sender, self.high_qc, self.suffix,
                             signer.sign(self.signing_bytes))

    def encode_into(self, w: Writer) -> None:
        w.u64(self.view).u32(self.sender)
        self.high_qc.encode_into(w)
        w.u32(len(self.suffix))
        for batch in self.suffix:
            batch.encode_into(w)
        w.flag(self.sig is not None)
        if self.sig is not None:
            write_signature(w, self.sig)

    @classmethod
    def decode_from(cls, r: Reader) -> ViewChangeMsg:
        view, sender = r.u64(), r.u32()
        qc = AuditQC.decode_from(r)
        suffix = tuple(Batch.decode(r.blob()) for _ in range(r.count(1 << 16)))
        sig = read_signature(r) if r.flag() else None
        return cls(view, sender, qc, suffix, sig)


@dataclass(frozen=True, eq=False)
class NewViewMsg:
    batch: Batch
    proofs: tuple[ViewChangeMsg, ...]

    def encode_into(self, w: Writer) -> None:
        self.batch.encode_into(w)
        w.u32(len(self.proofs))
        for proof in self.proofs:
            proof.encode_into(w)

    @classmethod
    def decode_from(cls, r: Reader) -> NewViewMsg:
        batch = Batch.decode(r.blob())
        proofs = tuple(ViewChangeMsg.decode_from(r) for _ in range(r.count(4096)))
        return cls(batch, proofs)


def verify_audit_qc(qc: AuditQC, profile: QuorumProfile, keyring: Keyring) -> bool:
    """Check thresholds and every signature of an audit certificate."""
    if qc == GENESIS_QC:
        return True
    memo = keyring._memo
    key = ("qc", qc, profile.n, profile.audit_quorum)
    cached = memo.get(key)
    if cached is not None:
        return cached
    ok = _check_qc(qc, profile, keyring)
    memo[key] = ok
    return ok


def _check_qc(qc: AuditQC, profile: QuorumProfile, keyring: Keyring) -> bool:
    if len(qc.batch_digest) != DIGEST_SIZE or qc.view == 0:
        return False
    count = len(qc.votes)
    if count < profile.audit_quorum or count > profile.n:
        return False
    if qc.fast != (count == profile.fast_quorum):
        return False
    signers = [s.signer for s in qc.votes]
    if signers != sorted(set(signers)):
        return False
    message = vote_message(qc.view, qc.batch_seq, qc.batch_digest)
    return all(keyring.verify(message, sig) for sig in qc.votes)


def validate_view_change(msg: ViewChangeMsg, profile: QuorumProfile, keyring: Keyring,
                         signing_interval: int) -> bool:
    """Structural and cryptographic check of one view-change summary."""
    if msg.sig is None or msg.sig.signer != msg.sender:
        return False
    if not keyring.verify(msg.signing_bytes, msg.sig):
        return False
    if not verify_audit_qc(msg.high_qc, profile, keyring):
        return False
    suffix = msg.suffix
    if not suffix or suffix[0].digest != msg.high_qc.batch_digest:
        return False
    if suffix[0].seq != msg.high_qc.batch_seq:
        return False
    prev = None
    for batch in suffix:
        if batch.view > msg.view:
            return False
        if prev is not None:
            if batch.parent != prev.digest or batch.seq != prev.seq + 1 or batch.view < prev.view:
                return False
        if batch.seq > 0 and (batch.new_view or is_signed_seq(batch.seq, signing_interval)):
            if not batch.signature_valid(keyring, leader_of(batch.view, profile.n)):
                return False
        if batch.payload is not None and not batch.payload_valid():
            return False
        prev = batch
    return True


@dataclass
class BranchChoice:
    proof: ViewChangeMsg
    anchor: Batch | None  # batch that forced the rule-2 filter, if any

    @property
    def tip(self) -> Batch:
        return self.proof.tip

    @property
    def high_qc(self) -> AuditQC:
        return self.proof.high_qc


def _appearances(proofs, union: dict[bytes, Batch]) -> list[set[bytes]]:
    """Digests that are ancestors-or-equal of each summary's tip, as far as the proofs show."""
    sets = []
    for proof in proofs:
        seen = set()
        cur = proof.tip
        while cur is not None and cur.digest not in seen:
            seen.add(cur.digest)
            cur = union.get(cur.parent)
        sets.append(seen)
    return sets


def select_branch(proofs, profile: QuorumProfile, rules: str = STANDARD_RULES) -> BranchChoice:
    """Apply the ordered selection filters to a set of view-change summaries.

    The result does not depend on the order of ``proofs``.
    """
    proofs = sorted(proofs, key=lambda p: p.sender)
    if not proofs:
        raise InsufficientProof("no view-change proofs")
    union: dict[bytes, Batch] = {}
    for proof in proofs:
        for batch in proof.suffix:
            union.setdefault(batch.digest, batch)
    appear = _appearances(proofs, union)
    idx = list(range(len(proofs)))

    # 1: branches that could hold the newest audited batch
    if rules == RELAXED_RULES:
        best = max(proofs, key=lambda p: (p.high_qc.view, p.high_qc.batch_seq, p.high_qc.batch_digest))
        target = best.high_qc.batch_digest
        idx = [i for i in idx if target in appear[i]]
    else:
        top_view = max(p.high_qc.view for p in proofs)
        idx = [i for i in idx if proofs[i].high_qc.view == top_view]

    # 2: branches that could hold a fast-audited batch
    anchor = None
    if profile.fast_path_enabled:
        counts = Counter(d for s in appear for d in s)
        k = profile.fast_appearances
        eligible = sorted(
            (union[d] for d, c in counts.items() if c >= k),
            key=lambda b: (b.view, b.seq, b.digest),
            reverse=True,
        )
        for batch in eligible:
            keep = [i for i in idx if batch.digest in appear[i]]
            if keep:
                idx, anchor = keep, batch
                break

    # 3 and 4: newest tip, then longest, then smallest digest
    idx.sort(key=lambda i: (-proofs[i].tip.view, -proofs[i].tip.seq, proofs[i].tip.digest))
    return BranchChoice(proofs[idx[0]], anchor)
