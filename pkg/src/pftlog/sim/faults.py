"""Scripted fault behaviours.

Byzantine replicas are ordinary :class:`Replica` machines whose outputs are
rewritten at the boundary (equivocation, omission) or whose proposal and
view-change hooks are overridden (spoofed commit index, spoofed branch).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..ledger import Batch, Vote, compute_root, is_signed_seq, make_batch
from ..messages import AppendEntry
from ..replica import Replica
from ..view_change import ViewChangeMsg, leader_of

CRASH = "crash"
OMISSION = "omission"
EQUIVOCATION = "equivocation"
SPOOF_COMMIT = "spoof-commit-qc"
SPOOF_BRANCH = "spoof-branch"
PARTITION = "partition"

FAULT_KINDS = (CRASH, OMISSION, EQUIVOCATION, SPOOF_COMMIT, SPOOF_BRANCH, PARTITION)
BYZANTINE_KINDS = (OMISSION, EQUIVOCATION, SPOOF_COMMIT, SPOOF_BRANCH)


@dataclass
class FaultSpec:
    kind: str
    targets: tuple[int, ...] = ()
    start: int = 0
    end: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        self.targets = tuple(self.targets)

    def active(self, now: int) -> bool:
        return self.start <= now and (self.end is None or now < self.end)

    @property
    def byzantine(self) -> bool:
        return self.kind in BYZANTINE_KINDS


class ByzantineReplica(Replica):
    """A replica that can lie about commits and about its branch."""

    def __init__(self, *args, faults=(), clock=lambda: 0, **kwargs):
        super().__init__(*args, **kwargs)
        self.faults = list(faults)
        self.clock = clock

    def _active(self, kind: str):
        now = self.clock()
        for f in self.faults:
            if f.kind == kind and f.active(now):
                return f
        return None

    def _proposal_commit_index(self) -> int:
        if self._active(SPOOF_COMMIT):
            return self.branch.tip.seq
        return super()._proposal_commit_index()

    def _view_change_summary(self, view: int) -> ViewChangeMsg:
        honest = super()._view_change_summary(view)
        fault = self._active(SPOOF_BRANCH)
        if fault is None:
            return honest
        base = honest.suffix[0]
        fake_view = view
        length = int(fault.params.get("length", 4))
        can_sign = leader_of(fake_view, self.n) == self.id
        suffix = [base]
        for i in range(length):
            parent = suffix[-1]
            seq = parent.seq + 1
            signed = is_signed_seq(seq, self.config.signing_interval)
            if signed and not can_sign:
                break
            fake = make_batch(fake_view, seq, parent.digest, base.seq, honest.high_qc,
                              (b"spoof-%d-%d-%d" % (self.id, view, i),),
                              signer=self.signer if signed else None)
            suffix.append(fake)
            self._store(fake)
        if len(suffix) == 1:
            return honest
        return ViewChangeMsg(view, self.id, honest.high_qc, tuple(suffix))


class Equivocator:
    """Rewrites a Byzantine leader's append-entries for one partition.

    Recipients in ``partitions[0]`` see the real batches; every other
    partition sees a consistent forged chain that forks at the first batch
    proposed while the fault is active.
    """

    def __init__(self, replica: Replica, fault: FaultSpec):
        self.replica = replica
        self.fault = fault
        self.partitions = [tuple(p) for p in fault.params["partitions"]]
        self.forged: list[dict[bytes, Batch]] = [dict() for _ in self.partitions]

    def group_of(self, dst: int) -> int:
        for i, group in enumerate(self.partitions):
            if dst in group:
                return i
        return 0

    def rewrite(self, dst: int, msg):
        if not isinstance(msg, AppendEntry) or msg.batch.new_view:
            return msg
        group = self.group_of(dst)
        if group == 0:
            return msg
        return AppendEntry(self._forge(group, msg.batch))

    def _forge(self, group: int, batch: Batch) -> Batch:
        table = self.forged[group]
        known = table.get(batch.digest)
        if known is not None:
            return known
        parent = table.get(batch.parent)
        parent_digest = parent.digest if parent is not None else batch.parent
        payload = tuple(txn + b"~%d" % group for txn in batch.payload) or (b"forged-%d" % group,)
        forged = replace(batch, parent=parent_digest, payload=payload,
                         payload_count=len(payload), payload_root=compute_root(payload),
                         leader_sig=None)
        if batch.leader_sig is not None:
            forged = forged.with_signature(self.replica.signer)
        table[batch.digest] = forged
        self.replica.store.add(forged)
        return forged


def drops_message(fault: FaultSpec, msg) -> bool:
    """Whether an omission fault suppresses ``msg``."""
    what = fault.params.get("messages", ("vote",))
    if isinstance(msg, Vote):
        return "vote" in what
    if isinstance(msg, ViewChangeMsg):
        return "view_change" in what
    if isinstance(msg, AppendEntry):
        return "append" in what
    return False
