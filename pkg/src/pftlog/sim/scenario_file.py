"""YAML scenario files for the simulator.

Example::

    name: crash-one
    platforms: [1, 1, 1, 1, 1]
    pi_safe: 2
    c: 1
    duration: 1500
    delay: {delta: 10, constant: true}
    load: {count: 20, interval: 20, start: 50}
    faults:
      - {kind: crash, targets: [3], start: 200, end: 600}
    drop:
      - {message: vote, from: [4], view: 1}

``drop`` rules silently lose matching messages. Every error names the line
it refers to.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from ..config import ConfigError, PftParameters
from ..crypto import SCHEMES
from ..ledger import Vote
from ..messages import AppendEntry
from ..view_change import RELAXED_RULES, STANDARD_RULES, NewViewMsg, ViewChangeMsg
from .faults import FAULT_KINDS, FaultSpec
from .harness import ClientLoad, DelayModel, MessageFilter, ScenarioConfig, ScenarioError

SHIPPED_DIR = Path(__file__).resolve().parent.parent / "scenarios"


class ScenarioSchemaError(ScenarioError):
    def __init__(self, message: str, line: int | None = None, source: str = "<scenario>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


_MESSAGES = {
    "vote": (Vote,),
    "append": (AppendEntry,),
    "view-change": (ViewChangeMsg,),
    "new-view": (NewViewMsg,),
    "any": (object,),
}

_INT = "int"
_BOOL = "bool"
_STR = "str"
_INTS = "ints"

TOP = {
    "name": _STR, "platforms": _INTS, "pi_safe": _INT, "pi_live": _INT, "c": _INT, "seed": _INT,
    "duration": _INT, "delay": "delay", "load": "load", "faults": "faults", "drop": "drop",
    "signing_interval": _INT, "lag_window": _INT, "view_timeout": _INT, "timeout_backoff": _INT,
    "batch_interval": _INT, "max_batch_size": _INT, "audit": _BOOL, "stabilization": _BOOL,
    "heartbeats": _BOOL, "idle_heartbeat": _BOOL, "initial_view": _INT,
    "fast_path_override": _BOOL, "check_liveness": _BOOL, "with_kv": _BOOL, "scheme": _STR,
    "branch_rules": _STR,
}
DELAY = {"delta": _INT, "min_delay": _INT, "gst": _INT, "pre_gst_cap": _INT, "constant": _BOOL}
LOAD = {"count": _INT, "interval": _INT, "start": _INT, "prefix": _STR, "times": _INTS}
FAULT = {"kind": _STR, "targets": _INTS, "start": _INT, "end": _INT}
DROP = {"message": _STR, "from": _INTS, "to": _INTS, "view": _INT, "seq": _INT,
        "min_seq": _INT, "max_seq": _INT, "start": _INT, "end": _INT}
RENAMED = {"audit": "audit_enabled", "stabilization": "stabilization_enabled"}


@dataclass(frozen=True)
class DropRule:
    message: str = "any"
    senders: frozenset[int] | None = None
    receivers: frozenset[int] | None = None
    view: int | None = None
    seq: int | None = None
    min_seq: int | None = None
    max_seq: int | None = None
    start: int | None = None
    end: int | None = None

    def matches(self, now: int, src: int, dst: int, msg) -> bool:
        if not isinstance(msg, _MESSAGES[self.message]):
            return False
        if self.senders is not None and src not in self.senders:
            return False
        if self.receivers is not None and dst not in self.receivers:
            return False
        if self.start is not None and now < self.start or self.end is not None and now >= self.end:
            return False
        view, seq = _view_seq(msg)
        if self.view is not None and view != self.view:
            return False
        for bound, ok in ((self.seq, lambda s: s == self.seq), (self.min_seq, lambda s: s >= self.min_seq),
                          (self.max_seq, lambda s: s <= self.max_seq)):
            if bound is not None and (seq is None or not ok(seq)):
                return False
        return True


def _view_seq(msg) -> tuple[int | None, int | None]:
    if isinstance(msg, Vote):
        return msg.view, msg.batch_seq
    if isinstance(msg, AppendEntry):
        return msg.batch.view, msg.batch.seq
    return getattr(msg, "view", None), None


def drop_filter(rules: list[DropRule]) -> MessageFilter | None:
    if not rules:
        return None

    def keep(now, src, dst, msg) -> bool:
        return not any(rule.matches(now, src, dst, msg) for rule in rules)

    return keep


class _Parser:
    def __init__(self, text: str, source: str):
        self.source = source
        self.loader = yaml.SafeLoader(text)

    def fail(self, message: str, node=None):
        line = node.start_mark.line + 1 if node is not None else None
        raise ScenarioSchemaError(message, line, self.source)

    def root(self):
        try:
            node = self.loader.get_single_node()
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ScenarioSchemaError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                                      mark.line + 1 if mark else None, self.source) from None
        if node is None:
            self.fail("scenario file is empty")
        return node

    def mapping(self, node, schema: dict, what: str, extra_ok: bool = False):
        if not isinstance(node, yaml.MappingNode):
            self.fail(f"{what} must be a mapping", node)
        out, extra = {}, {}
        for knode, vnode in node.value:
            key = self.loader.construct_object(knode)
            if not isinstance(key, str):
                self.fail(f"{what} keys must be strings", knode)
            if key in out or key in extra:
                self.fail(f"duplicate key {key!r} in {what}", knode)
            kind = schema.get(key)
            if kind is None:
                if extra_ok:
                    extra[key] = self.loader.construct_object(vnode, deep=True)
                    continue
                self.fail(f"unknown key {key!r} in {what}; expected one of {sorted(schema)}", knode)
            out[key] = (self.value(vnode, kind, key), vnode)
        return out, extra

    def value(self, node, kind: str, key: str):
        if kind in (_INT, _BOOL, _STR):
            if not isinstance(node, yaml.ScalarNode):
                self.fail(f"{key} must be a {kind}", node)
            value = self.loader.construct_object(node)
            if kind == _INT and (not isinstance(value, int) or isinstance(value, bool)):
                self.fail(f"{key} must be an integer, got {value!r}", node)
            if kind == _INT and value < 0:
                self.fail(f"{key} must be >= 0", node)
            if kind == _BOOL and not isinstance(value, bool):
                self.fail(f"{key} must be true or false, got {value!r}", node)
            if kind == _STR and not isinstance(value, str):
                self.fail(f"{key} must be a string, got {value!r}", node)
            return value
        if kind == _INTS:
            if not isinstance(node, yaml.SequenceNode):
                self.fail(f"{key} must be a list of integers", node)
            return tuple(self.value(item, _INT, key) for item in node.value)
        if kind in ("faults", "drop"):
            if not isinstance(node, yaml.SequenceNode):
                self.fail(f"{key} must be a list", node)
            return [getattr(self, kind[:-1] if kind == "faults" else kind)(item) for item in node.value]
        if kind == "delay":
            fields, _ = self.mapping(node, DELAY, "delay")
            return DelayModel(**{k: v for k, (v, _) in fields.items()})
        if kind == "load":
            fields, _ = self.mapping(node, LOAD, "load")
            return ClientLoad(**{k: v for k, (v, _) in fields.items()})
        raise AssertionError(kind)

    def fault(self, node) -> FaultSpec:
        fields, params = self.mapping(node, FAULT, "fault", extra_ok=True)
        if "kind" not in fields:
            self.fail("fault needs a kind", node)
        kind, knode = fields["kind"]
        if kind not in FAULT_KINDS:
            self.fail(f"unknown fault kind {kind!r}; expected one of {list(FAULT_KINDS)}", knode)
        start = fields.get("start", (0, None))[0]
        end = fields.get("end", (None, None))[0]
        if end is not None and end <= start:
            self.fail("fault end must be after its start", fields["end"][1])
        return FaultSpec(kind, fields.get("targets", ((), None))[0], start, end, params)

    def drop(self, node) -> DropRule:
        fields, _ = self.mapping(node, DROP, "drop rule")
        values = {k: v for k, (v, _) in fields.items()}
        message = values.pop("message", "any")
        if message not in _MESSAGES:
            self.fail(f"unknown message kind {message!r}; expected one of {sorted(_MESSAGES)}",
                      fields["message"][1])
        senders = values.pop("from", None)
        receivers = values.pop("to", None)
        return DropRule(message, frozenset(senders) if senders is not None else None,
                        frozenset(receivers) if receivers is not None else None, **values)


def parse_scenario(text: str, source: str = "<scenario>",
                   overrides: dict | None = None) -> tuple[ScenarioConfig, MessageFilter | None]:
    """Parse scenario YAML into a config and an optional message filter."""
    p = _Parser(text, source)
    root = p.root()
    fields, _ = p.mapping(root, TOP, "scenario")
    values = {k: v for k, (v, _) in fields.items()}
    for key, value in (overrides or {}).items():
        if key not in TOP:
            raise ScenarioSchemaError(f"cannot override unknown key {key!r}", None, source)
        values[key] = value
    if "platforms" not in values:
        p.fail("scenario needs 'platforms'", root)
    try:
        params = PftParameters(values.pop("platforms"), values.pop("pi_safe", 0),
                               values.pop("pi_live", 0), values.pop("c", 0))
    except ConfigError as exc:
        p.fail(str(exc), fields["platforms"][1])
    rules = values.pop("drop", [])
    kwargs = {}
    for key, value in values.items():
        if key == "delay":
            kwargs["delays"] = value
        else:
            kwargs[RENAMED.get(key, key)] = value
    if kwargs.get("scheme", "keyed-hash") not in SCHEMES:
        p.fail(f"unknown scheme; expected one of {sorted(SCHEMES)}", fields["scheme"][1])
    if kwargs.get("branch_rules", STANDARD_RULES) not in (STANDARD_RULES, RELAXED_RULES):
        p.fail(f"branch_rules must be {STANDARD_RULES!r} or {RELAXED_RULES!r}", fields["branch_rules"][1])
    n = params.n
    for fault in kwargs.get("faults", []):
        if any(t >= n for t in fault.targets):
            raise ScenarioSchemaError(f"fault targets {list(fault.targets)} outside 0..{n - 1}", None, source)
    try:
        config = ScenarioConfig(params, **kwargs)
        config.check_thresholds()
    except (ScenarioError, ValueError) as exc:
        raise ScenarioSchemaError(str(exc), None, source) from None
    return config, drop_filter(rules)


def load_scenario(path: str | Path, overrides: dict | None = None):
    """Load a scenario file, or a shipped scenario by bare name."""
    path = Path(path)
    if not path.exists() and not path.suffix:
        shipped = SHIPPED_DIR / f"{path.name}.yaml"
        if shipped.exists():
            path = shipped
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioSchemaError(f"cannot read scenario: {exc.strerror}", None, str(path)) from None
    return parse_scenario(text, str(path), overrides)


def shipped_scenarios() -> list[str]:
    return sorted(p.stem for p in SHIPPED_DIR.glob("*.yaml"))
