"""Latency and message metrics extracted from simulation traces."""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field

from .invariants import Registry


@dataclass
class Metrics:
    submitted: dict[bytes, int] = field(default_factory=dict)
    committed: dict[bytes, int] = field(default_factory=dict)
    audited: dict[bytes, int] = field(default_factory=dict)
    audit_paths: dict[str, int] = field(default_factory=dict)
    census: dict[str, int] = field(default_factory=dict)
    batches: int = 0
    views: set[int] = field(default_factory=set)

    @property
    def view_changes(self) -> int:
        return len(self.views)

    def _latencies(self, done: dict[bytes, int]) -> list[int]:
        return [done[t] - s for t, s in self.submitted.items() if t in done]

    @property
    def commit_latencies(self) -> list[int]:
        return self._latencies(self.committed)

    @property
    def audit_latencies(self) -> list[int]:
        return self._latencies(self.audited)

    def median_audit(self) -> float:
        return statistics.median(self.audit_latencies)

    def median_commit(self) -> float:
        return statistics.median(self.commit_latencies)

    def summary(self) -> dict:
        out = {"submitted": len(self.submitted), "committed": len(self.committed),
               "audited": len(self.audited), "batches": self.batches,
               "audit_paths": dict(self.audit_paths), "census": dict(self.census),
               "view_changes": self.view_changes}
        if self.committed:
            out["median_commit_latency"] = self.median_commit()
        if self.audited:
            out["median_audit_latency"] = self.median_audit()
        return out


def measure(trace, node: int | None = None) -> Metrics:
    """Per-request latencies as first observed at ``node`` (any node if None)."""
    reg = Registry()
    m = Metrics(census=dict(trace.census))
    proposed = set()
    for ev in trace.events:
        kind, data = ev.kind, ev.data
        if kind == "store":
            reg.add(data["batch"])
            continue
        if kind == "submit":
            m.submitted.setdefault(data["txn"], ev.time)
            continue
        if node is not None and ev.node != node:
            continue
        if kind == "enter_view":
            m.views.add(data["view"])
        elif kind == "propose":
            proposed.add(data["batch"].digest)
        elif kind in ("commit", "audit"):
            done = m.committed if kind == "commit" else m.audited
            for _, entry in reg.chain(data["digest"], data["old"]):
                for txn in entry[4] or ():
                    done.setdefault(txn, ev.time)
            if kind == "audit":
                m.audit_paths[data["path"]] = m.audit_paths.get(data["path"], 0) + 1
    m.batches = len(proposed)
    return m
