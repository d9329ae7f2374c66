"""The replica state machine.

A :class:`Replica` is a single-threaded deterministic event processor. Each
entry point (``start``, ``submit``, ``on_message``, ``on_timer``,
``recover``) takes the current time and returns a list of effects: messages
to send, timers to arm or cancel, and :class:`Note` records describing state
changes. Drivers (the simulator or the network server) execute the effects.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .config import QuorumProfile
from .crypto import Keyring, Signature, Signer
from .ledger import (
    GENESIS_QC,
    AuditQC,
    Batch,
    BatchStore,
    Branch,
    ConflictError,
    LedgerError,
    UnknownAncestry,
    Vote,
    is_signed_seq,
    make_audit_qc,
    make_batch,
    vote_message,
)
from .messages import AppendEntry, NewViewRequest, SyncRequest, SyncResponse
from .view_change import (
    STANDARD_RULES,
    InsufficientProof,
    NewViewMsg,
    ViewChangeMsg,
    leader_of,
    select_branch,
    validate_view_change,
    verify_audit_qc,
)

NORMAL = "normal"
VIEW_CHANGE = "view-change"

VIEW_TIMER = "view"
PROPOSE_TIMER = "propose"


@dataclass
class ReplicaConfig:
    replica_id: int
    profile: QuorumProfile
    signing_interval: int = 1
    lag_window: int = 64
    view_timeout: int = 100
    timeout_backoff: int = 2
    max_backoff_exponent: int = 6
    batch_interval: int = 1
    max_batch_size: int = 64
    audit_enabled: bool = True
    stabilization_enabled: bool = True
    branch_rules: str = STANDARD_RULES
    heartbeats: bool = True
    idle_heartbeat: bool = False
    initial_view: int = 0
    sync_limit: int = 1024


# effects


@dataclass(frozen=True)
class Send:
    dst: int
    msg: object


@dataclass(frozen=True)
class Broadcast:
    msg: object


@dataclass(frozen=True)
class SetTimer:
    name: str
    delay: int


@dataclass(frozen=True)
class CancelTimer:
    name: str


@dataclass(frozen=True)
class Note:
    kind: str
    data: dict = field(default_factory=dict)


@dataclass(frozen=True)
class NodeState:
    """Read-only snapshot of a replica's protocol state."""

    replica_id: int
    v_curr: int
    phase: str
    leader: int
    tip_seq: int
    tip_digest: bytes
    high_audit_qc: AuditQC
    high_commit_index: int
    commit_index: int
    audit_index: int
    signing_interval: int
    lag_window: int

    @property
    def lag(self) -> int:
        return self.commit_index - self.audit_index

    def to_dict(self) -> dict:
        return {
            "replica": self.replica_id,
            "view": self.v_curr,
            "phase": self.phase,
            "leader": self.leader,
            "tip": self.tip_seq,
            "commit_index": self.commit_index,
            "audit_index": self.audit_index,
            "lag": self.lag,
            "high_audit_qc": [self.high_audit_qc.view, self.high_audit_qc.batch_seq],
        }


@dataclass(frozen=True)
class AuditEvidence:
    """Why a batch became audited: one fast QC, or two same-view QCs.

    For the slow path ``qcs[0]`` certifies the audited batch and ``qcs[1]``
    certifies ``carrier``, a batch that embeds ``qcs[0]``.
    """

    audited_seq: int
    qcs: tuple[AuditQC, ...]
    carrier_seq: int


class Replica:
    def __init__(self, config: ReplicaConfig, signer: Signer, keyring: Keyring, app=None):
        self.config = config
        self.id = config.replica_id
        self.profile = config.profile
        self.n = config.profile.n
        self.signer = signer
        self.keyring = keyring
        self.app = app

        self.store = BatchStore()
        self.branch = Branch(self.store)
        self.v_curr = config.initial_view
        self.phase = VIEW_CHANGE
        self.nv_view = -1
        self.voted_seq = 0
        self.vc_sent = -1
        self.high_qc = GENESIS_QC
        self.commit_index = 0
        self.high_commit_index = 0
        self.audit_index = 0
        self.evidence: list[AuditEvidence] = []
        self.view_stable = False
        self.first_commit_seq = 0
        self.consecutive_failures = 0
        self.app_commit_seq = 0
        self.pending_txns: dict[bytes, int] = {}
        self.txn_seq: dict[bytes, int] = {}
        self.crashed = False
        self._reset_volatile()
        self.out: list = []

    # volatile state is lost on a crash

    def _reset_volatile(self) -> None:
        self.pending_qcs: dict[int, dict[int, Vote]] = {}
        self.signed_votes: dict[int, dict[int, Signature]] = {}
        self.formed_qcs: dict[int, AuditQC] = {}
        self.vc_msgs: dict[int, dict[int, ViewChangeMsg]] = {}
        self.my_vc: ViewChangeMsg | None = None
        self.my_sigs: dict[tuple[int, int], Signature] = {}
        self.deferred: list = []
        self.pending_lead: tuple | None = None
        self.nv_sent: dict[int, NewViewMsg] = {}
        self.flagged: set[int] = set()
        self.timers: set[str] = set()
        self.lead_disabled = False
        self.announced_commit = 0
        self.announced_audit = 0
        self.last_work_seq = 0
        self.next_propose = 0
        self.nv_requested = -1
        self.throttled = False
        self.qc_events = 0
        self.propose_mark = None
        self.stabilizer_seq = 0

    # public entry points

    def drain(self) -> list:
        out, self.out = self.out, []
        return out

    def start(self, now: int) -> list:
        """Boot: abandon the initial view so the first real view can form."""
        self._send_view_change(now, self.v_curr)
        return self.drain()

    def submit(self, now: int, txn: bytes) -> list:
        seq = self.txn_seq.get(txn)
        done = self.audit_index if self.config.audit_enabled else self.commit_index
        if txn not in self.pending_txns and (seq is None or seq > done):
            self.pending_txns[txn] = now
            self._update_timer()
            self._kick_proposer(now)
        return self.drain()

    def on_timer(self, now: int, name: str) -> list:
        self.timers.discard(name)
        if name == VIEW_TIMER:
            self._on_view_timeout(now)
        elif name == PROPOSE_TIMER:
            self._propose(now)
        return self.drain()

    def on_message(self, now: int, src: int, msg) -> list:
        handler = self._handlers.get(type(msg))
        if handler is not None:
            handler(self, now, src, msg)
        return self.drain()

    def recover(self, now: int) -> list:
        """Restart after a crash with durable state intact and volatile state lost."""
        self._reset_volatile()
        self.crashed = False
        if self.is_leader() and self.phase == NORMAL:
            self.lead_disabled = True
        self._note("recover", view=self.v_curr)
        if self.phase == VIEW_CHANGE and self.vc_sent >= 0:
            self._send_view_change(now, self.vc_sent, count_failure=False)
        self._update_timer(reset=True)
        return self.drain()

    def is_leader(self, view: int | None = None) -> bool:
        return leader_of(self.v_curr if view is None else view, self.n) == self.id

    def node_state(self) -> NodeState:
        tip = self.branch.tip
        return NodeState(self.id, self.v_curr, self.phase, leader_of(self.v_curr, self.n),
                         tip.seq, tip.digest, self.high_qc, self.high_commit_index,
                         self.commit_index, self.audit_index,
                         self.config.signing_interval, self.config.lag_window)

    # helpers

    def _note(self, kind: str, **data) -> None:
        self.out.append(Note(kind, data))

    def _set_timer(self, name: str, delay: int) -> None:
        self.timers.add(name)
        self.out.append(SetTimer(name, delay))

    def _cancel_timer(self, name: str) -> None:
        if name in self.timers:
            self.timers.discard(name)
            self.out.append(CancelTimer(name))

    def _timeout(self) -> int:
        exp = min(self.consecutive_failures, self.config.max_backoff_exponent)
        return self.config.view_timeout * self.config.timeout_backoff ** exp

    def _signed(self, batch: Batch) -> bool:
        return batch.new_view or (batch.seq > 0 and is_signed_seq(batch.seq, self.config.signing_interval))

    def _view_active(self) -> bool:
        return self.phase == NORMAL and self.nv_view == self.v_curr

    def _update_timer(self, reset: bool = False) -> None:
        if self.crashed:
            return
        needed = (
            self.phase == VIEW_CHANGE
            or self.nv_view != self.v_curr
            or not self.view_stable
            or bool(self.pending_txns)
        )
        if needed and (reset or VIEW_TIMER not in self.timers):
            self._set_timer(VIEW_TIMER, self._timeout())
        elif not needed:
            self._cancel_timer(VIEW_TIMER)

    def _store(self, batch: Batch) -> None:
        if self.store.add(batch):
            self._note("store", batch=batch)

    def _append(self, batch: Batch) -> None:
        self._store(batch)
        self.branch.append(batch)
        if batch.payload:
            for txn in batch.payload:
                self.txn_seq.setdefault(txn, batch.seq)

    def _my_sig(self, batch: Batch) -> Signature:
        key = (batch.view, batch.seq)
        sig = self.my_sigs.get(key)
        if sig is None:
            sig = self.signer.sign(vote_message(batch.view, batch.seq, batch.digest))
            self.my_sigs[key] = sig
        return sig

    def _qc_valid(self, qc: AuditQC) -> bool:
        return verify_audit_qc(qc, self.profile, self.keyring)

    # confirmations

    def _advance_commit(self, now: int, seq: int) -> None:
        seq = min(seq, self.branch.tip.seq)
        if seq <= self.commit_index:
            return
        old = self.commit_index
        self.commit_index = seq
        self._note("commit", old=old, new=seq, digest=self.branch.at(seq).digest, view=self.v_curr)
        if not self.config.audit_enabled:
            self._retire_txns(old, seq)
            self._update_timer(reset=True)
        self._apply_app()

    def _retire_txns(self, old: int, new: int) -> None:
        if not self.pending_txns:
            return
        for batch in self.branch.slice(old + 1, new):
            for txn in batch.payload or ():
                self.pending_txns.pop(txn, None)

    def _apply_app(self) -> None:
        if self.app is None:
            return
        while self.app_commit_seq < self.commit_index:
            self.app_commit_seq += 1
            self.app.apply_committed(self.branch.at(self.app_commit_seq))
        if self.audit_index > self.app.applied_audit_seq:
            self.app.advance_audit(self.audit_index)

    def _implied_audit(self, qc: AuditQC | None) -> int:
        """Audit index a replica reaches after learning ``qc``."""
        if qc is None or qc.view == 0:
            return 0
        target = self.store.get(qc.batch_digest)
        if target is None:
            return 0
        best = 0
        if qc.fast and self.profile.fast_path_enabled and not target.new_view:
            best = qc.batch_seq
        inner = target.audit_qc
        if inner is not None and inner.view == qc.view:
            best = max(best, inner.batch_seq)
        return best

    def _learn_qc(self, now: int, qc: AuditQC | None) -> None:
        """Apply the audit rules for a certificate this replica just learned."""
        if qc is None or qc.view == 0:
            return
        if not self.branch.contains(qc.batch_digest):
            return
        if qc.rank > self.high_qc.rank:
            self.high_qc = qc
            self._update_timer(reset=True)
        if qc.view == self.v_curr and not self.view_stable:
            self.view_stable = True
            self._note("stable", view=self.v_curr)
            self._update_timer()
        if not self.config.audit_enabled:
            return
        target = self.store[qc.batch_digest]
        evidence = None
        if qc.fast and self.profile.fast_path_enabled and not target.new_view:
            evidence = AuditEvidence(qc.batch_seq, (qc,), qc.batch_seq)
        inner = target.audit_qc
        if inner is not None and inner.view == qc.view and (evidence is None or inner.batch_seq > evidence.audited_seq):
            evidence = AuditEvidence(inner.batch_seq, (inner, qc), qc.batch_seq)
        if evidence is not None and evidence.audited_seq > self.audit_index:
            self._advance_audit(now, evidence)

    def _advance_audit(self, now: int, evidence: AuditEvidence) -> None:
        old = self.audit_index
        new = evidence.audited_seq
        self.audit_index = new
        self.evidence.append(evidence)
        self.consecutive_failures = 0
        path = "fast" if len(evidence.qcs) == 1 else "slow"
        self._note("audit", old=old, new=new, digest=self.branch.at(new).digest,
                   path=path, view=self.v_curr)
        if self.commit_index < new:
            self._advance_commit(now, new)
        self._retire_txns(old, new)
        for j in [j for j in self.pending_qcs if j <= new]:
            del self.pending_qcs[j]
        for j in [j for j in self.signed_votes if j <= new]:
            del self.signed_votes[j]
        self._apply_app()
        self._update_timer(reset=True)
        self._kick_proposer(now)

    # leader: proposals

    def can_propose(self) -> bool:
        return (
            self.is_leader()
            and self._view_active()
            and not self.lead_disabled
            and (self.view_stable or not self.config.stabilization_enabled)
        )

    def enforce_lag(self) -> bool:
        """True iff the leader may propose under the lag window."""
        if not self.config.audit_enabled:
            return True
        return self.commit_index - self.audit_index <= self.config.lag_window

    def _inflight_ok(self) -> bool:
        return self.branch.tip.seq - self.commit_index <= self.config.lag_window

    def _heartbeat_needed(self) -> bool:
        if not self.config.heartbeats:
            return False
        if self.config.idle_heartbeat:
            return True
        behind = self.last_work_seq > self.announced_commit or (
            self.config.audit_enabled and self.last_work_seq > self.announced_audit)
        # only once earlier proposals are confirmed and something new can be announced
        tip = self.branch.tip
        if self.config.audit_enabled and self._signed(tip):
            settled = self.high_qc.batch_seq >= tip.seq
        else:
            settled = self.commit_index >= tip.seq
        return behind and settled and self.propose_mark != (self.commit_index, self.qc_events)

    def _proposable_txns(self) -> list[bytes]:
        out = []
        for txn in self.pending_txns:
            if txn not in self.txn_seq:
                out.append(txn)
                if len(out) >= self.config.max_batch_size:
                    break
        return out

    def _kick_proposer(self, now: int) -> None:
        if PROPOSE_TIMER in self.timers or not self.can_propose():
            return
        if not (self._heartbeat_needed() or self._proposable_txns()):
            return
        if not self.enforce_lag() or not self._inflight_ok():
            if not self.throttled:
                self.throttled = True
                self._note("throttle", commit=self.commit_index, audit=self.audit_index,
                           tip=self.branch.tip.seq)
            return
        self._set_timer(PROPOSE_TIMER, max(0, self.next_propose - now))

    def _propose(self, now: int) -> None:
        if not self.can_propose():
            return
        txns = self._proposable_txns()
        if not txns and not self._heartbeat_needed():
            return
        if not self.enforce_lag() or not self._inflight_ok():
            return
        self.throttled = False
        self.leader_propose(now, txns)
        self.next_propose = now + self.config.batch_interval
        self._kick_proposer(now)

    def _proposal_commit_index(self) -> int:
        return self.commit_index

    def leader_propose(self, now: int, txns) -> AppendEntry:
        if not self.is_leader():
            raise LedgerError("only the leader proposes")
        tip = self.branch.tip
        seq = tip.seq + 1
        qc = self.high_qc if self.config.audit_enabled else None
        batch = make_batch(self.v_curr, seq, tip.digest, self._proposal_commit_index(), qc,
                           txns, signer=self.signer if is_signed_seq(seq, self.config.signing_interval) else None)
        self._append(batch)
        self.voted_seq = seq
        self.propose_mark = (self.commit_index, self.qc_events)
        self.announced_commit = max(self.announced_commit, batch.commit_index)
        self.announced_audit = max(self.announced_audit, self._implied_audit(qc))
        if txns:
            self.last_work_seq = seq
        self._note("propose", batch=batch, commit=self.commit_index, audit=self.audit_index,
                   lag=self.commit_index - self.audit_index)
        self._record_own_vote(batch)
        msg = AppendEntry(batch)
        self.out.append(Broadcast(msg))
        self._check_quorums(now, seq)
        return msg

    def _record_own_vote(self, batch: Batch) -> None:
        vote = Vote(self.v_curr, batch.digest, batch.seq, self.id)
        lo = max(self.commit_index + 1, self.first_commit_seq, 1)
        for j in range(lo, batch.seq + 1):
            self.pending_qcs.setdefault(j, {})[self.id] = vote
        if self.config.audit_enabled:
            for x in self._signable(batch.seq):
                self.signed_votes.setdefault(x.seq, {}).setdefault(self.id, self._my_sig(x))

    def _signable(self, upto: int) -> list[Batch]:
        """Signed batches of the current view that a vote up to ``upto`` signs."""
        out = []
        for x in self.branch.slice(self.audit_index + 1, upto):
            if x.view == self.v_curr and self._signed(x):
                out.append(x)
        return out

    # leader: votes

    def _on_vote(self, now: int, src: int, vote: Vote) -> None:
        if not self.is_leader() or not self._view_active() or self.lead_disabled:
            return
        if vote.view != self.v_curr or vote.voter != src or src in self.flagged:
            return
        batch = self.branch.at(vote.batch_seq)
        if batch is None or batch.digest != vote.batch_digest or batch.view != self.v_curr:
            return
        fresh = []
        for seq, sig in vote.sigs:
            if seq <= self.audit_index or seq > vote.batch_seq:
                continue
            x = self.branch.at(seq)
            if x.view != self.v_curr or not self._signed(x):
                continue
            if src in self.signed_votes.get(seq, ()):
                continue
            if sig.signer != src or not self.keyring.verify(vote_message(x.view, seq, x.digest), sig):
                self.flagged.add(src)
                self._note("flagged", voter=src)
                return
            fresh.append((seq, sig))
        lo = max(self.commit_index + 1, self.first_commit_seq, 1)
        if not self.view_stable and not self.config.audit_enabled:
            lo = min(lo, self.stabilizer_seq)
        for j in range(lo, vote.batch_seq + 1):
            self.pending_qcs.setdefault(j, {}).setdefault(src, vote)
        for seq, sig in fresh:
            self.signed_votes.setdefault(seq, {})[src] = sig
        self._check_quorums(now, vote.batch_seq, src)

    def on_vote(self, now: int, src: int, vote: Vote) -> list:
        self._on_vote(now, src, vote)
        return self.drain()

    def _check_quorums(self, now: int, upto: int, voter: int | None = None) -> None:
        prof = self.profile
        best_commit = None
        lo = max(self.commit_index + 1, self.first_commit_seq, 1)
        for j in range(upto, lo - 1, -1):
            voters = self.pending_qcs.get(j)
            if voters is not None and len(voters) >= prof.commit_quorum:
                best_commit = j
                break
        new_qcs = []
        if self.config.audit_enabled:
            for j in sorted(self.signed_votes):
                if j > upto:
                    break
                sigs = self.signed_votes[j]
                count = len(sigs)
                have = self.formed_qcs.get(j)
                if count < prof.audit_quorum or (have is not None and (have.fast or count < prof.n)):
                    continue
                qc = make_audit_qc(self.branch.at(j), self.v_curr, sigs.values(), fast=count == prof.n)
                self.formed_qcs[j] = qc
                new_qcs.append(qc)
        stabilized = False
        if not self.view_stable and not self.config.audit_enabled:
            voters = self.pending_qcs.get(self.stabilizer_seq, ())
            if len(voters) >= prof.audit_quorum:
                self.view_stable = stabilized = True
                self._note("stable", view=self.v_curr)
                self._update_timer()
                self.qc_events += 1
        if best_commit is not None:
            self.high_commit_index = max(self.high_commit_index, best_commit)
            self._note("commit_qc", seq=best_commit, voters=sorted(self.pending_qcs[best_commit]),
                       trigger_voter=voter)
            self._advance_commit(now, best_commit)
        for qc in new_qcs:
            self._note("audit_qc", qc=qc, voters=sorted(qc.voters), trigger_seq=upto, trigger_voter=voter)
            self.qc_events += 1
            self._learn_qc(now, qc)
        if new_qcs or stabilized or best_commit is not None:
            self._kick_proposer(now)

    # follower: append entries

    def _on_append_entry(self, now: int, src: int, msg: AppendEntry) -> None:
        batch = msg.batch
        if batch.view > self.v_curr and src == leader_of(batch.view, self.n):
            self._request_new_view(src, batch.view)
            return
        if batch.view != self.v_curr or self.phase != NORMAL:
            return
        if src != leader_of(self.v_curr, self.n) or self.is_leader():
            return
        if self.nv_view != self.v_curr:
            self._request_new_view(src, batch.view)
            return
        if batch.new_view or batch.seq <= self.voted_seq or not batch.payload_valid():
            return
        if self._signed(batch) and not batch.signature_valid(self.keyring, src):
            return
        qc = batch.audit_qc
        if self.config.audit_enabled:
            if qc is None or not self._qc_valid(qc):
                return
            if self.config.stabilization_enabled and qc.view != self.v_curr:
                self._note("reject_unstable", seq=batch.seq)
                return
        self._store(batch)
        try:
            path = self.branch.path_from(batch)
        except UnknownAncestry as missing:
            self._defer(src, msg, missing.missing)
            return
        except ConflictError:
            self._note("conflict", seq=batch.seq, view=self.v_curr)
            self._abandon(now, self.v_curr)
            return
        for x in path[:-1]:
            if x.view != self.v_curr or x.new_view or x.payload is None:
                return
            if self._signed(x) and not x.signature_valid(self.keyring, src):
                return
        for x in path:
            self._append(x)
        self.voted_seq = batch.seq
        self._note("accept", seq=batch.seq, digest=batch.digest)
        if not self.config.audit_enabled and not self.view_stable:
            self.view_stable = True
            self._update_timer()
        self._advance_commit(now, batch.commit_index)
        self._learn_qc(now, qc)
        self._vote(batch, src)

    def _request_new_view(self, leader: int, view: int) -> None:
        if self.nv_requested < view:
            self.nv_requested = view
            self.out.append(Send(leader, NewViewRequest(view)))

    def _vote(self, batch: Batch, leader: int) -> None:
        sigs = ()
        if self.config.audit_enabled:
            sigs = tuple((x.seq, self._my_sig(x)) for x in self._signable(batch.seq))
        vote = Vote(self.v_curr, batch.digest, batch.seq, self.id, sigs)
        self._note("vote", seq=batch.seq, digest=batch.digest, signed=bool(sigs))
        self.out.append(Send(leader, vote))

    def _defer(self, src: int, msg, missing: bytes) -> None:
        self.deferred.append((src, msg))
        del self.deferred[:-64]
        self.out.append(Send(src, SyncRequest(missing, self.audit_index)))

    def _on_sync_request(self, now: int, src: int, msg: SyncRequest) -> None:
        chain = self.store.chain_down(msg.want, msg.stop_seq, self.config.sync_limit)
        chain = [b for b in chain if b.payload is not None]
        self.out.append(Send(src, SyncResponse(tuple(chain))))

    def _on_sync_response(self, now: int, src: int, msg: SyncResponse) -> None:
        added = False
        prev = None
        for batch in msg.batches:
            if prev is not None and (prev.parent != batch.digest or prev.seq != batch.seq + 1):
                break
            if not batch.payload_valid():
                break
            if batch.digest not in self.store:
                self._store(batch)
                added = True
            prev = batch
        if not added:
            return
        deferred, self.deferred = self.deferred, []
        for src_, m in deferred:
            self._handlers[type(m)](self, now, src_, m)
        if self.pending_lead is not None:
            proofs, self.pending_lead = self.pending_lead, None
            self._lead_new_view(now, proofs)

    # view change

    def _on_view_timeout(self, now: int) -> None:
        self._note("timeout", view=self.v_curr, phase=self.phase)
        if self.phase == VIEW_CHANGE and self.my_vc is not None:
            self.consecutive_failures += 1
            self.out.append(Broadcast(self.my_vc))
            self._set_timer(VIEW_TIMER, self._timeout())
            return
        self._abandon(now, self.v_curr)

    def _abandon(self, now: int, view: int) -> None:
        if view <= self.vc_sent and self.phase == VIEW_CHANGE:
            return
        self._send_view_change(now, view)

    def _view_change_summary(self, view: int) -> ViewChangeMsg:
        suffix = tuple(self.branch.slice(self.high_qc.batch_seq))
        return ViewChangeMsg(view, self.id, self.high_qc, suffix)

    def _send_view_change(self, now: int, view: int, count_failure: bool = True) -> None:
        self.phase = VIEW_CHANGE
        self.vc_sent = max(self.vc_sent, view)
        if count_failure and view >= self.v_curr and view > self.config.initial_view:
            self.consecutive_failures += 1
        self._cancel_timer(PROPOSE_TIMER)
        self.pending_lead = None
        vc = self._view_change_summary(view).signed(self.signer)
        self.my_vc = vc
        self._note("view_change", view=view, high_qc=(vc.high_qc.view, vc.high_qc.batch_seq),
                   tip=vc.tip.seq)
        self.out.append(Broadcast(vc))
        self._set_timer(VIEW_TIMER, self._timeout())
        self._record_view_change(now, vc)

    def _on_view_change(self, now: int, src: int, msg: ViewChangeMsg) -> None:
        if msg.sender != src or msg.view < self.v_curr:
            return
        if src in self.vc_msgs.get(msg.view, ()):
            return
        if not validate_view_change(msg, self.profile, self.keyring, self.config.signing_interval):
            return
        self._record_view_change(now, msg)

    def _record_view_change(self, now: int, msg: ViewChangeMsg) -> None:
        bucket = self.vc_msgs.setdefault(msg.view, {})
        if msg.sender in bucket:
            return
        bucket[msg.sender] = msg
        prof = self.profile
        # amplification: join the highest view change with enough support
        support = [v for v, b in self.vc_msgs.items()
                   if len(b) >= prof.amplify_threshold and v >= self.v_curr and v > self.vc_sent]
        if support:
            self._send_view_change(now, max(support), count_failure=False)
        if (len(bucket) >= prof.view_change_quorum and msg.view + 1 > self.v_curr
                and msg.view >= self.vc_sent):
            proofs = tuple(bucket.values())[:prof.view_change_quorum]
            self._enter_view(now, msg.view + 1)
            if self.is_leader():
                self._lead_new_view(now, proofs)
        for v in [v for v in self.vc_msgs if v + 1 < self.v_curr]:
            del self.vc_msgs[v]

    def _enter_view(self, now: int, view: int) -> None:
        self.v_curr = view
        self.phase = NORMAL
        self.voted_seq = 0
        self.view_stable = False
        self.lead_disabled = False
        self.pending_qcs.clear()
        self.signed_votes.clear()
        self.formed_qcs.clear()
        self.my_sigs.clear()
        self.deferred.clear()
        self.announced_commit = self.announced_audit = 0
        self.throttled = False
        self.propose_mark = None
        self._cancel_timer(PROPOSE_TIMER)
        self._note("enter_view", view=view, leader=leader_of(view, self.n))
        # the timer armed with our view change already covers synchronizing into this view
        if not (VIEW_TIMER in self.timers and self.vc_sent + 1 == view):
            self._set_timer(VIEW_TIMER, self._timeout())

    def _adopt_branch(self, now: int, tip: Batch) -> bool:
        """Roll back to the fork with ``tip`` and extend to it; False if not possible yet."""
        try:
            fork, path = self.branch.fork_point(tip)
        except UnknownAncestry as missing:
            self._missing = missing.missing
            return False
        if fork.seq < self.audit_index:
            self._note("refuse_rollback", fork=fork.seq, audit=self.audit_index)
            raise ConflictError("chosen branch drops audited batches")
        if fork.digest != self.branch.tip.digest:
            old_commit = self.commit_index
            _, removed = self.branch.rollback_to(fork.digest)
            for b in removed:
                for txn in b.payload or ():
                    if self.txn_seq.get(txn) == b.seq:
                        del self.txn_seq[txn]
            self.commit_index = min(self.commit_index, fork.seq)
            self.high_commit_index = min(self.high_commit_index, fork.seq)
            if not self.branch.contains(self.high_qc.batch_digest):
                self.high_qc = GENESIS_QC
            self._note("rollback", fork=fork.seq, removed=[(b.seq, b.digest) for b in removed],
                       old_commit=old_commit, new_commit=self.commit_index)
            if self.app is not None and self.app_commit_seq > self.commit_index:
                self.app.rollback(self.commit_index)
                self.app_commit_seq = self.commit_index
        for b in path:
            if b.payload is None:
                full = self.store.get(b.digest)
                if full is None or full.payload is None:
                    self._missing = b.digest
                    return False
                b = full
            self._append(b)
        return True

    def _lead_new_view(self, now: int, proofs) -> None:
        view = self.v_curr
        try:
            choice = select_branch(proofs, self.profile, self.config.branch_rules)
        except InsufficientProof:
            return
        for proof in proofs:
            for b in proof.suffix:
                self._store(b)
        try:
            ok = self._adopt_branch(now, choice.tip)
        except ConflictError:
            return
        if not ok:
            self.pending_lead = proofs
            self.out.append(Send(choice.proof.sender, SyncRequest(self._missing, self.audit_index)))
            return
        tip = self.branch.tip
        self.high_qc = choice.high_qc
        stabilizer = make_batch(view, tip.seq + 1, tip.digest, self.commit_index,
                                choice.high_qc if self.config.audit_enabled else None,
                                (), new_view=True, signer=self.signer)
        self._append(stabilizer)
        self.nv_view = view
        self.voted_seq = stabilizer.seq
        self.last_work_seq = stabilizer.seq
        self.stabilizer_seq = stabilizer.seq
        if self.config.stabilization_enabled and self.config.audit_enabled:
            self.first_commit_seq = stabilizer.seq + 1
        else:
            self.first_commit_seq = stabilizer.seq
        nv = NewViewMsg(stabilizer, tuple(proofs))
        self.nv_sent[view] = nv
        self._note("new_view", view=view, seq=stabilizer.seq, digest=stabilizer.digest,
                   chosen=choice.proof.sender, tip=tip.seq, anchor=choice.anchor.seq if choice.anchor else None,
                   proof_tips=[(p.sender, p.tip.seq, p.tip.digest) for p in proofs],
                   proofs=tuple(proofs))
        self.out.append(Broadcast(nv))
        self._record_own_vote(stabilizer)
        if not self.config.stabilization_enabled:
            self.view_stable = True
        self._check_quorums(now, stabilizer.seq)
        self._update_timer()
        self._kick_proposer(now)

    def _on_new_view_request(self, now: int, src: int, msg: NewViewRequest) -> None:
        nv = self.nv_sent.get(msg.view)
        if nv is not None:
            self.out.append(Send(src, nv))

    def _on_new_view(self, now: int, src: int, msg: NewViewMsg) -> None:
        stabilizer = msg.batch
        view = stabilizer.view
        if view < self.v_curr or (view == self.v_curr and self.nv_view == view):
            return
        if self.phase == VIEW_CHANGE and view <= self.vc_sent:
            return
        if src != leader_of(view, self.n) or src == self.id:
            return
        if not stabilizer.new_view or not stabilizer.signature_valid(self.keyring, src):
            return
        if not stabilizer.payload_valid() or stabilizer.payload:
            return
        prof = self.profile
        proofs = msg.proofs
        senders = {p.sender for p in proofs}
        if len(proofs) != prof.view_change_quorum or len(senders) != len(proofs):
            return
        for p in proofs:
            if p.view != view - 1 or not validate_view_change(p, prof, self.keyring, self.config.signing_interval):
                return
        choice = select_branch(proofs, prof, self.config.branch_rules)
        expected_qc = choice.high_qc if self.config.audit_enabled else None
        if (stabilizer.parent != choice.tip.digest or stabilizer.seq != choice.tip.seq + 1
                or stabilizer.audit_qc != expected_qc):
            self._note("reject_new_view", view=view, reason="branch-rule")
            self._jump_and_abandon(now, view)
            return
        for p in proofs:
            for b in p.suffix:
                self._store(b)
        self._store(stabilizer)
        try:
            fork, _ = self.branch.fork_point(choice.tip)
        except UnknownAncestry as missing:
            self._defer(src, msg, missing.missing)
            return
        except ConflictError:
            return
        if fork.seq < self.audit_index:
            self._note("reject_new_view", view=view, reason="audited-rollback")
            self._jump_and_abandon(now, view)
            return
        if view > self.v_curr or self.phase != NORMAL:
            self._enter_view(now, view)
        if not self._adopt_branch(now, choice.tip):
            self._defer(src, msg, self._missing)
            return
        self._append(stabilizer)
        self.nv_view = view
        self.voted_seq = stabilizer.seq
        if not self.branch.contains(self.high_qc.batch_digest) or choice.high_qc.rank > self.high_qc.rank:
            self.high_qc = choice.high_qc
        if not self.config.stabilization_enabled:
            self.view_stable = True
        self._note("accept_new_view", view=view, seq=stabilizer.seq, digest=stabilizer.digest)
        self._advance_commit(now, stabilizer.commit_index)
        self._vote(stabilizer, src)
        self._update_timer(reset=True)

    def _jump_and_abandon(self, now: int, view: int) -> None:
        if view > self.v_curr:
            self._enter_view(now, view)
        self._send_view_change(now, view)

    _handlers: dict = {}


Replica._handlers = {
    AppendEntry: Replica._on_append_entry,
    Vote: Replica._on_vote,
    ViewChangeMsg: Replica._on_view_change,
    NewViewMsg: Replica._on_new_view,
    SyncRequest: Replica._on_sync_request,
    SyncResponse: Replica._on_sync_response,
    NewViewRequest: Replica._on_new_view_request,
}
