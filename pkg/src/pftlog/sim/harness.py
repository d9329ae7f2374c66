"""Discrete-event simulator hosting replica machines on a virtual network."""
from __future__ import annotations

import heapq
import json
import random
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from typing import Callable

from ..config import PftParameters, QuorumProfile, validate_config
from ..crypto import SCHEMES, make_keys
from ..kv import VersionedStore
from ..ledger import AuditQC, Batch
from ..replica import (
    Broadcast,
    CancelTimer,
    Note,
    Replica,
    ReplicaConfig,
    Send,
    SetTimer,
)
from ..view_change import STANDARD_RULES, leader_of
from .faults import (
    CRASH,
    EQUIVOCATION,
    OMISSION,
    PARTITION,
    SPOOF_BRANCH,
    SPOOF_COMMIT,
    ByzantineReplica,
    Equivocator,
    FaultSpec,
    drops_message,
)
from .invariants import InvariantReport, LivenessParams, Monitor


class ScenarioError(ValueError):
    pass


@dataclass
class DelayModel:
    """Message delays in ticks.

    Before ``gst`` delays are drawn from ``[min_delay, pre_gst_cap]``;
    afterwards from ``[min_delay, delta]``. ``constant`` pins every delay
    to ``delta``.
    """

    delta: int = 10
    min_delay: int = 1
    gst: int = 0
    pre_gst_cap: int = 100
    constant: bool = False


@dataclass
class ClientLoad:
    count: int = 0
    interval: int = 10
    start: int = 50
    prefix: str = "tx"
    times: tuple[int, ...] = ()  # explicit submission times override count/interval

    def schedule(self) -> list[int]:
        if self.times:
            return list(self.times)
        return [self.start + i * self.interval for i in range(self.count)]


@dataclass
class ScenarioConfig:
    params: PftParameters
    seed: int = 0
    duration: int = 2000
    delays: DelayModel = field(default_factory=DelayModel)
    faults: list[FaultSpec] = field(default_factory=list)
    load: ClientLoad = field(default_factory=ClientLoad)
    invariants: list[str] | None = None
    signing_interval: int = 1
    lag_window: int = 64
    view_timeout: int = 200
    timeout_backoff: int = 2
    batch_interval: int = 1
    max_batch_size: int = 64
    audit_enabled: bool = True
    stabilization_enabled: bool = True
    branch_rules: str = STANDARD_RULES
    heartbeats: bool = True
    idle_heartbeat: bool = False
    initial_view: int = 0
    scheme: str = "keyed-hash"
    with_kv: bool = False
    check_liveness: bool = False
    threshold_exceeding: bool = False
    fast_path_override: bool | None = None
    name: str = "scenario"

    def __post_init__(self):
        if self.delays.gst > self.duration:
            raise ScenarioError("gst must not exceed duration")
        if self.scheme not in SCHEMES:
            raise ScenarioError(f"unknown signature scheme {self.scheme!r}")

    def profile(self) -> QuorumProfile:
        profile = validate_config(self.params)
        if self.fast_path_override is not None:
            profile = replace(profile, fast_path_enabled=self.fast_path_override)
        return profile

    def byzantine(self) -> set[int]:
        return {t for f in self.faults if f.byzantine for t in f.targets}

    def check_thresholds(self) -> None:
        """Reject fault schedules beyond the configured budgets."""
        if self.threshold_exceeding:
            return
        prof = self.profile()
        if len(self.byzantine()) > prof.f_safe:
            raise ScenarioError(
                f"{len(self.byzantine())} Byzantine replicas exceed f_safe={prof.f_safe}")
        crashed = {t for f in self.faults if f.kind == CRASH for t in f.targets}
        if len(crashed | self.byzantine()) > max(prof.u, prof.f_safe):
            raise ScenarioError("too many faulty replicas for the profile")

    def replica_config(self, rid: int, profile: QuorumProfile) -> ReplicaConfig:
        names = {f.name for f in fields(ReplicaConfig)}
        opts = {k: getattr(self, k) for k in names if hasattr(self, k) and k not in ("profile",)}
        return ReplicaConfig(replica_id=rid, profile=profile, **opts)


@dataclass(frozen=True)
class TraceEvent:
    time: int
    order: int
    node: int
    kind: str
    data: dict
    indices: tuple = ()

    def record(self) -> dict:
        return {"t": self.time, "i": self.order, "node": self.node, "kind": self.kind,
                "idx": list(self.indices), "data": _plain(self.data)}


def _plain(value):
    if isinstance(value, bytes):
        return value.hex()[:16]
    if isinstance(value, Batch):
        return {"seq": value.seq, "view": value.view, "digest": value.digest.hex()[:16],
                "parent": value.parent.hex()[:16], "nv": value.new_view,
                "txns": len(value.payload or ())}
    if isinstance(value, AuditQC):
        return {"seq": value.batch_seq, "view": value.view, "fast": value.fast,
                "voters": sorted(value.voters)}
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items() if k != "proofs"}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass
class Trace:
    events: list[TraceEvent] = field(default_factory=list)
    census: Counter = field(default_factory=Counter)
    end_time: int = 0

    def lines(self) -> list[str]:
        return [json.dumps(ev.record(), sort_keys=True) for ev in self.events]

    def of_kind(self, *kinds: str, node: int | None = None) -> list[TraceEvent]:
        return [ev for ev in self.events if ev.kind in kinds and (node is None or ev.node == node)]


@dataclass
class SimResult:
    config: ScenarioConfig
    trace: Trace
    report: InvariantReport
    replicas: list[Replica]
    profile: QuorumProfile


MessageFilter = Callable[[int, int, int, object], bool]

_DELIVER, _TIMER, _SUBMIT, _FAULT_ON, _FAULT_OFF, _START = range(6)


class Simulator:
    def __init__(self, config: ScenarioConfig, message_filter: MessageFilter | None = None):
        config.check_thresholds()
        self.config = config
        self.profile = config.profile()
        self.n = self.profile.n
        self.rng = random.Random(config.seed)
        self.queue: list = []
        self.counter = 0
        self.now = 0
        self.trace = Trace()
        self.message_filter = message_filter
        self.crashed: set[int] = set()
        self.link_free: dict[tuple[int, int], int] = {}
        self.timer_gen: dict[tuple[int, str], int] = {}
        self.byzantine = config.byzantine()
        scheme = SCHEMES[config.scheme]
        signers, self.keyring = make_keys(self.n, scheme, seed=b"sim")
        self.signers = signers
        self.replicas: list[Replica] = []
        for rid in range(self.n):
            rc = config.replica_config(rid, self.profile)
            app = VersionedStore() if config.with_kv else None
            mine = [f for f in config.faults if rid in f.targets and f.kind in (SPOOF_COMMIT, SPOOF_BRANCH)]
            if mine:
                replica = ByzantineReplica(rc, signers[rid], self.keyring, app=app,
                                           faults=mine, clock=lambda: self.now)
            else:
                replica = Replica(rc, signers[rid], self.keyring, app=app)
            self.replicas.append(replica)
        self.equivocators = {}
        for f in config.faults:
            if f.kind == EQUIVOCATION:
                for t in f.targets:
                    self.equivocators[t] = (f, Equivocator(self.replicas[t], f))
        self.omissions = [f for f in config.faults if f.kind == OMISSION]
        self.partitions = [f for f in config.faults if f.kind == PARTITION]
        liveness = None
        if config.check_liveness:
            liveness = LivenessParams(config.delays.gst, self.profile.u, config.view_timeout,
                                      config.signing_interval, config.delays.delta)
        self.monitor = Monitor(
            self.n, self.byzantine, lag_window=config.lag_window,
            fast_appearances=self.profile.fast_appearances if self.profile.fast_path_enabled else None,
            enabled=config.invariants, liveness=liveness, audit_enabled=config.audit_enabled,
        )

    # scheduling

    def _push(self, time: int, kind: int, *args) -> None:
        self.counter += 1
        heapq.heappush(self.queue, (time, self.counter, kind, args))

    def _record(self, node: int, kind: str, data: dict) -> None:
        if 0 <= node < self.n:
            r = self.replicas[node]
            idx = (r.v_curr, r.commit_index, r.audit_index)
        else:
            idx = ()
        ev = TraceEvent(self.now, len(self.trace.events), node, kind, data, idx)
        self.trace.events.append(ev)
        self.monitor.feed(ev)

    def _delay(self) -> int:
        d = self.config.delays
        if d.constant:
            return d.delta
        hi = d.pre_gst_cap if self.now < d.gst else d.delta
        return self.rng.randint(d.min_delay, max(d.min_delay, hi))

    def _partitioned(self, src: int, dst: int) -> bool:
        for f in self.partitions:
            if f.active(self.now):
                groups = f.params["groups"]
                gs = next((i for i, g in enumerate(groups) if src in g), -1)
                gd = next((i for i, g in enumerate(groups) if dst in g), -1)
                if gs != gd:
                    return True
        return False

    def _send(self, src: int, dst: int, msg) -> None:
        for f in self.omissions:
            if src in f.targets and f.active(self.now) and drops_message(f, msg):
                return
        eq = self.equivocators.get(src)
        if eq is not None and eq[0].active(self.now):
            msg = eq[1].rewrite(dst, msg)
        self.trace.census[type(msg).__name__] += 1
        if self._partitioned(src, dst):
            return
        if self.message_filter is not None and not self.message_filter(self.now, src, dst, msg):
            return
        link = (src, dst)
        at = max(self.now + self._delay(), self.link_free.get(link, 0))
        self.link_free[link] = at
        self._push(at, _DELIVER, src, dst, msg)

    def _apply(self, node: int, effects) -> None:
        for eff in effects:
            kind = type(eff)
            if kind is Note:
                self._record(node, eff.kind, eff.data)
            elif kind is Send:
                self._send(node, eff.dst, eff.msg)
            elif kind is Broadcast:
                for dst in range(self.n):
                    if dst != node:
                        self._send(node, dst, eff.msg)
            elif kind is SetTimer:
                key = (node, eff.name)
                gen = self.timer_gen.get(key, 0) + 1
                self.timer_gen[key] = gen
                self._push(self.now + eff.delay, _TIMER, node, eff.name, gen)
            elif kind is CancelTimer:
                key = (node, eff.name)
                self.timer_gen[key] = self.timer_gen.get(key, 0) + 1

    # running

    def _schedule_inputs(self) -> None:
        for f in self.config.faults:
            if f.kind == CRASH:
                self._push(f.start, _FAULT_ON, f)
                if f.end is not None:
                    self._push(f.end, _FAULT_OFF, f)
        for rid in range(self.n):
            self._push(0, _START, rid)
        load = self.config.load
        for i, at in enumerate(load.schedule()):
            self._push(at, _SUBMIT, f"{load.prefix}-{i}".encode())

    def submit(self, txn: bytes) -> None:
        self._record(-1, "submit", {"txn": txn})
        for rid, replica in enumerate(self.replicas):
            if rid not in self.crashed:
                self._apply(rid, replica.submit(self.now, txn))

    def run(self, until: int | None = None) -> SimResult:
        if not self.trace.events and self.counter == 0:
            self._schedule_inputs()
        end = self.config.duration if until is None else until
        queue = self.queue
        while queue and queue[0][0] <= end:
            time, _, kind, args = heapq.heappop(queue)
            self.now = time
            if kind == _DELIVER:
                src, dst, msg = args
                if dst in self.crashed:
                    continue
                self._apply(dst, self.replicas[dst].on_message(time, src, msg))
            elif kind == _TIMER:
                node, name, gen = args
                if node in self.crashed or self.timer_gen.get((node, name)) != gen:
                    continue
                self._apply(node, self.replicas[node].on_timer(time, name))
            elif kind == _SUBMIT:
                self.submit(args[0])
            elif kind == _START:
                rid = args[0]
                if rid not in self.crashed:
                    self._apply(rid, self.replicas[rid].start(time))
            elif kind == _FAULT_ON:
                for t in args[0].targets:
                    self.crashed.add(t)
                    self.replicas[t].crashed = True
                    self._record(t, "crash", {})
            elif kind == _FAULT_OFF:
                for t in args[0].targets:
                    self.crashed.discard(t)
                    self._apply(t, self.replicas[t].recover(time))
        self.now = end
        self.trace.end_time = end
        return SimResult(self.config, self.trace, self.monitor.finish(end), self.replicas, self.profile)


def run_scenario(config: ScenarioConfig, message_filter: MessageFilter | None = None) -> SimResult:
    return Simulator(config, message_filter).run()


def leader_at(result: SimResult, view: int) -> int:
    return leader_of(view, result.profile.n)
