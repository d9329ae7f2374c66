"""Safety and liveness checkers evaluated over simulation traces."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from ..config import liveness_bound
from ..view_change import leader_of

AUDITED_AGREEMENT = "AuditedAgreement"
COMMIT_AGREEMENT = "CommitAgreement"
COMMIT_PRESERVATION = "CommitPreservation"
STABILITY_BEFORE_QC = "StabilityBeforeQC"
FAST_PATH_GUARD = "FastPathGuard"
LIVENESS_BOUND = "LivenessBound"
AUDIT_LAG = "AuditLag"

ALL_INVARIANTS = (
    AUDITED_AGREEMENT,
    COMMIT_AGREEMENT,
    COMMIT_PRESERVATION,
    STABILITY_BEFORE_QC,
    FAST_PATH_GUARD,
    LIVENESS_BOUND,
    AUDIT_LAG,
)


@dataclass
class InvariantResult:
    name: str
    checked: bool = True
    violations: int = 0
    first: str | None = None

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def flag(self, message: str) -> None:
        self.violations += 1
        if self.first is None:
            self.first = message


@dataclass
class InvariantReport:
    results: dict[str, InvariantResult] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values() if r.checked)

    def __getitem__(self, name: str) -> InvariantResult:
        return self.results[name]

    def violated(self) -> list[str]:
        return [r.name for r in self.results.values() if r.checked and not r.passed]

    def rows(self) -> list[dict]:
        return [
            {"invariant": r.name, "checked": r.checked,
             "status": "skip" if not r.checked else ("pass" if r.passed else "FAIL"),
             "violations": r.violations, "first": r.first}
            for r in self.results.values()
        ]


@dataclass
class LivenessParams:
    gst: int
    u: int
    view_timeout: int
    signing_interval: int
    delta: int


class Registry:
    """Every batch any replica stored: digest -> (parent, seq, view, new_view, payload)."""

    def __init__(self):
        self.batches: dict[bytes, tuple] = {}

    def add(self, batch) -> None:
        if batch.digest not in self.batches or self.batches[batch.digest][4] is None:
            self.batches[batch.digest] = (batch.parent, batch.seq, batch.view, batch.new_view, batch.payload)

    def seq(self, d: bytes) -> int:
        return self.batches[d][1]

    def is_ancestor(self, a: bytes, d: bytes) -> bool:
        a_seq = self.batches[a][1]
        cur = d
        while True:
            entry = self.batches.get(cur)
            if entry is None:
                return False
            if entry[1] <= a_seq:
                return cur == a
            cur = entry[0]

    def comparable(self, a: bytes, b: bytes) -> bool:
        if self.seq(a) <= self.seq(b):
            return self.is_ancestor(a, b)
        return self.is_ancestor(b, a)

    def chain(self, d: bytes, above_seq: int):
        """Batches from ``d`` down to (excluding) ``above_seq``."""
        cur = d
        while cur in self.batches:
            entry = self.batches[cur]
            if entry[1] <= above_seq:
                return
            yield cur, entry
            cur = entry[0]


class _ChainCheck:
    """All reported digests must lie on a single chain."""

    def __init__(self, result: InvariantResult, registry: Registry):
        self.result = result
        self.registry = registry
        self.top: bytes | None = None

    def see(self, d: bytes, where: str) -> None:
        if self.top is None:
            self.top = d
            return
        if not self.registry.comparable(self.top, d):
            self.result.flag(f"{where}: seq {self.registry.seq(d)} conflicts with seq {self.registry.seq(self.top)}")
            return
        if self.registry.seq(d) > self.registry.seq(self.top):
            self.top = d


class Monitor:
    """Online evaluation of the registered invariants.

    ``byzantine`` lists replicas whose reports are ignored; commit-level
    checks only apply when it is empty.
    """

    def __init__(self, n: int, byzantine=(), lag_window: int = 64,
                 fast_appearances: int | None = None, enabled=None,
                 liveness: LivenessParams | None = None, audit_enabled: bool = True):
        self.n = n
        self.byzantine = frozenset(byzantine)
        self.lag_window = lag_window
        self.fast_appearances = fast_appearances
        self.liveness = liveness
        enabled = set(ALL_INVARIANTS if enabled is None else enabled)
        byz_free = not self.byzantine
        self.registry = Registry()
        self.results = {name: InvariantResult(name, checked=name in enabled) for name in ALL_INVARIANTS}
        for name in (COMMIT_AGREEMENT, COMMIT_PRESERVATION):
            self.results[name].checked &= byz_free
        if fast_appearances is None:
            self.results[FAST_PATH_GUARD].checked = False
        if liveness is None:
            self.results[LIVENESS_BOUND].checked = False
        if not audit_enabled:
            for name in (AUDITED_AGREEMENT, STABILITY_BEFORE_QC, FAST_PATH_GUARD, LIVENESS_BOUND, AUDIT_LAG):
                self.results[name].checked = False
        self.audited = _ChainCheck(self.results[AUDITED_AGREEMENT], self.registry)
        self.committed = _ChainCheck(self.results[COMMIT_AGREEMENT], self.registry)
        self.stable_views: set[int] = set()
        self.nv_batch: dict[int, bytes] = {}
        self.fast_audited: list[bytes] = []
        self.submitted: dict[bytes, int] = {}
        self.audited_at: dict[bytes, int] = {}
        self.end_time = 0

    def report(self) -> InvariantReport:
        return InvariantReport(dict(self.results))

    def feed(self, ev) -> None:
        self.end_time = max(self.end_time, ev.time)
        kind = ev.kind
        data = ev.data
        if kind == "store":
            self.registry.add(data["batch"])
            return
        if kind == "submit":
            self.submitted.setdefault(data["txn"], ev.time)
            return
        if ev.node in self.byzantine or ev.node < 0:
            return
        where = f"t={ev.time} node={ev.node}"
        if kind == "audit":
            if self.results[AUDITED_AGREEMENT].checked:
                self.audited.see(data["digest"], where)
            if data["path"] == "fast":
                self.fast_audited.append(data["digest"])
            if self.liveness is not None:
                for _, entry in self.registry.chain(data["digest"], data["old"]):
                    for txn in entry[4] or ():
                        self.audited_at.setdefault(txn, ev.time)
        elif kind == "commit":
            if self.results[COMMIT_AGREEMENT].checked:
                self.committed.see(data["digest"], where)
        elif kind == "rollback":
            lost = [s for s, _ in data["removed"] if s <= data["old_commit"]]
            if lost and self.results[COMMIT_PRESERVATION].checked:
                self.results[COMMIT_PRESERVATION].flag(
                    f"{where}: rolled back committed seqs {min(lost)}..{max(lost)}")
        elif kind == "propose":
            if data["lag"] > self.lag_window:
                self.results[AUDIT_LAG].flag(f"{where}: proposed with lag {data['lag']}")
        elif kind == "stable":
            if ev.node == leader_of(data["view"], self.n):
                self.stable_views.add(data["view"])
        elif kind == "new_view":
            self.nv_batch[data["view"]] = data["digest"]
            self._check_fast_guard(data.get("proofs", ()), where)
        elif kind == "audit_qc":
            self._check_stability(data["qc"], where)

    def _check_stability(self, qc, where: str) -> None:
        res = self.results[STABILITY_BEFORE_QC]
        entry = self.registry.batches.get(qc.batch_digest)
        if entry is None or entry[3]:
            return
        nv = self.nv_batch.get(qc.view)
        if qc.view not in self.stable_views or nv is None or not self.registry.is_ancestor(nv, qc.batch_digest):
            res.flag(f"{where}: audit QC on seq {qc.batch_seq} of view {qc.view} before stabilization")

    def _check_fast_guard(self, proofs, where: str) -> None:
        if not self.fast_audited or not proofs or self.fast_appearances is None:
            return
        union = {}
        for p in proofs:
            for b in p.suffix:
                union.setdefault(b.digest, b)
        counts: Counter = Counter()
        for p in proofs:
            seen = set()
            cur = p.tip
            while cur is not None and cur.digest not in seen:
                seen.add(cur.digest)
                cur = union.get(cur.parent)
            counts.update(seen)
        heavy = [d for d, c in counts.items() if c >= self.fast_appearances]
        reg = self.registry
        for fast in self.fast_audited:
            fast_view = reg.batches[fast][2]
            for d in heavy:
                if d in reg.batches and reg.batches[d][2] == fast_view and not reg.comparable(fast, d):
                    self.results[FAST_PATH_GUARD].flag(
                        f"{where}: seq {reg.seq(d)} conflicts with fast-audited seq {reg.seq(fast)}")
                    return

    def finish(self, end_time: int | None = None) -> InvariantReport:
        end = self.end_time if end_time is None else end_time
        lv = self.liveness
        if lv is not None and self.results[LIVENESS_BOUND].checked:
            res = self.results[LIVENESS_BOUND]
            for txn, t in self.submitted.items():
                start = max(t, lv.gst)
                deadline = liveness_bound(start, lv.u, lv.view_timeout, lv.signing_interval, lv.delta)
                done = self.audited_at.get(txn)
                if done is None:
                    if deadline < end:
                        res.flag(f"request {txn!r} submitted at {t} never audited (deadline {deadline})")
                elif done > deadline:
                    res.flag(f"request {txn!r} submitted at {t} audited at {done} > {deadline}")
        return self.report()


def check_invariants(trace, n: int, byzantine=(), **kwargs) -> InvariantReport:
    """Evaluate the invariants over a complete trace from scratch."""
    monitor = Monitor(n, byzantine, **kwargs)
    for ev in trace.events:
        monitor.feed(ev)
    return monitor.finish(trace.end_time)
