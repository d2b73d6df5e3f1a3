"""Context acquisition, inference and service adaptation (codec selection)."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence, Union

from cnqf.errors import AdaptationFailed, CapacityViolation, IllegalState, NoFeasibleCodec, ParseError, ValidationError
from cnqf.mms import MeasurementRecord
from cnqf.rms import Session, SessionState, transition

ENTITY_KINDS = ("user", "device", "session", "network_element", "link", "place")
ATTRIBUTES = ("location", "preference", "activity", "device", "device_capability", "congested")

Value = Union[str, int, float, bool]


@dataclass(frozen=True)
class ContextRecord:
    entity_id: str
    entity_kind: str
    attribute: str
    value: Value
    source: str
    timestamp: int

    def __post_init__(self):
        if self.entity_kind not in ENTITY_KINDS:
            raise ValidationError(f"unknown entity kind {self.entity_kind}")
        if not isinstance(self.value, (str, int, float, bool)):
            raise ValidationError("context values are strings, numbers or booleans")


@dataclass(frozen=True)
class ContextChange:
    entity_id: str
    entity_kind: str
    attribute: str
    old: Value | None
    new: Value
    timestamp: int
    source: str


def _same(a: Any, b: Any) -> bool:
    # True == 1 in Python; context values of different types never match
    return isinstance(a, bool) == isinstance(b, bool) and a == b


class ContextStore:
    def __init__(self):
        self.latest: dict[tuple[str, str], tuple[Value, int]] = {}
        self.kinds: dict[str, str] = {}
        self.history: list[ContextRecord] = []

    def seed(self, record: ContextRecord) -> None:
        """Install a baseline value without recording a change."""
        self.latest[(record.entity_id, record.attribute)] = (record.value, record.timestamp)
        self.kinds[record.entity_id] = record.entity_kind

    def get(self, entity_id: str, attribute: str, default: Any = None) -> Any:
        entry = self.latest.get((entity_id, attribute))
        return default if entry is None else entry[0]

    def facts(self) -> dict[tuple[str, str], Value]:
        return {key: value for key, (value, _) in self.latest.items()}

    def ingest(self, record: ContextRecord) -> ContextChange | None:
        self.history.append(record)
        key = (record.entity_id, record.attribute)
        current = self.latest.get(key)
        if current is not None and record.timestamp < current[1]:
            return None
        self.latest[key] = (record.value, record.timestamp)
        self.kinds[record.entity_id] = record.entity_kind
        old = None if current is None else current[0]
        if current is not None and _same(old, record.value):
            return None
        return ContextChange(
            record.entity_id, record.entity_kind, record.attribute, old, record.value, record.timestamp, record.source
        )


def ingest(store: ContextStore, record: ContextRecord) -> ContextChange | None:
    return store.ingest(record)


# -- inference --------------------------------------------------------------

_OPS = {
    ">=": lambda a, b: a >= b,
    ">": lambda a, b: a > b,
    "<=": lambda a, b: a <= b,
    "<": lambda a, b: a < b,
    "==": lambda a, b: a == b,
}


@dataclass(frozen=True)
class InferenceRule:
    """Derive ``attribute = value`` for a target once ``metric op threshold``
    has held over its last ``sustain_windows`` samples."""

    rule_id: str
    entity_kind: str
    attribute: str
    value: Value
    metric: str
    op: str
    threshold: float
    sustain_windows: int = 1
    target: str = "*"
    requires: tuple[tuple[str, Value], ...] = ()

    def __post_init__(self):
        if self.sustain_windows < 1:
            raise ValidationError("sustain_windows must be positive")
        if self.op not in _OPS:
            raise ValidationError(f"unknown comparison {self.op}")
        if self.attribute == self.metric or any(a == self.attribute for a, _ in self.requires):
            raise ValidationError(f"rule {self.rule_id} reads the attribute it derives")


def infer(
    store: ContextStore, rules: Sequence[InferenceRule], metric_history: Sequence[MeasurementRecord]
) -> list[ContextRecord]:
    series: dict[tuple[str, str], list[MeasurementRecord]] = {}
    for rec in metric_history:
        series.setdefault((rec.target, rec.metric), []).append(rec)
    derived = []
    for rule in rules:
        for (target, metric), recs in sorted(series.items()):
            if metric != rule.metric or rule.target not in ("*", target):
                continue
            window = recs[-rule.sustain_windows:]
            if len(window) < rule.sustain_windows:
                continue
            if not all(_OPS[rule.op](r.value, rule.threshold) for r in window):
                continue
            if not all(_same(store.get(target, attr), want) for attr, want in rule.requires):
                continue
            derived.append(
                ContextRecord(target, rule.entity_kind, rule.attribute, rule.value, f"infer:{rule.rule_id}", window[-1].timestamp)
            )
    return derived


def congestion_rules(sustain_windows: int = 2, high: float = 0.8, low: float = 0.6) -> list[InferenceRule]:
    """Network-context rules: a link is congested while utilization stays high."""
    return [
        InferenceRule("congested_on", "link", "congested", True, "utilization", ">=", high, sustain_windows),
        InferenceRule("congested_off", "link", "congested", False, "utilization", "<=", low, sustain_windows),
    ]


# -- codecs -----------------------------------------------------------------

@dataclass(frozen=True)
class Codec:
    name: str
    media_kind: str
    bitrate_kbps: int


@dataclass(frozen=True)
class CodecTable:
    entries: Mapping[str, Codec]

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, int]]) -> "CodecTable":
        entries: dict[str, Codec] = {}
        for media, codecs in data.items():
            if media not in ("audio", "video"):
                raise ValidationError(f"unknown media kind {media}")
            for name, rate in codecs.items():
                if name in entries:
                    raise ValidationError(f"duplicate codec {name}")
                if isinstance(rate, bool) or not isinstance(rate, int) or rate <= 0:
                    raise ValidationError(f"codec {name} bitrate must be a positive integer")
                entries[name] = Codec(name, media, rate)
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> "CodecTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "CodecTable":
        return cls.from_dict(json.loads(resources.files("cnqf.data").joinpath("codecs.json").read_text(encoding="utf-8")))

    def bitrate(self, name: str) -> int:
        try:
            return self.entries[name].bitrate_kbps
        except KeyError:
            raise ValidationError(f"unknown codec {name}") from None


def select_codec(table: CodecTable, media_kind: str, available_kbps: int) -> str:
    """Highest-bitrate codec of ``media_kind`` that fits; ties go to the smaller name."""
    if available_kbps < 0:
        raise ValidationError("available bandwidth must be non-negative")
    feasible = [c for c in table.entries.values() if c.media_kind == media_kind and c.bitrate_kbps <= available_kbps]
    if not feasible:
        raise NoFeasibleCodec(f"no {media_kind} codec fits in {available_kbps} kbps")
    return min(feasible, key=lambda c: (-c.bitrate_kbps, c.name)).name


# -- adaptation -------------------------------------------------------------

@dataclass(frozen=True)
class AdaptationDirective:
    session_id: str
    parameter: str
    new_value: Value
    cause: str
    decision: str | None = None

    def __post_init__(self):
        if self.parameter not in ("codec", "bandwidth_kbps", "dscp"):
            raise ValidationError(f"cannot adapt {self.parameter}")
        if not self.cause:
            raise ValidationError("adaptation directive without a causing context change")


class BrokerInteraction(Protocol):
    def resize(self, session_id: str, kbps: int) -> None:
        """Change the session's reservation; raise CapacityViolation if it cannot."""


def target_parameters(directive: AdaptationDirective, session: Session, codecs: CodecTable) -> tuple[int, str | None]:
    if directive.parameter == "codec":
        return codecs.bitrate(str(directive.new_value)), str(directive.new_value)
    if directive.parameter == "bandwidth_kbps":
        return int(directive.new_value), session.current_codec
    return session.current_bandwidth_kbps, session.current_codec


def begin_adaptation(
    directive: AdaptationDirective, session: Session, broker: BrokerInteraction, codecs: CodecTable
) -> Session:
    """ACTIVE -> ADAPTING with the new parameters reserved through the broker.

    On a reservation failure the session comes back ACTIVE with its prior
    parameters, attached to the raised AdaptationFailed as ``.session``.
    """
    if session.state is not SessionState.ACTIVE:
        raise IllegalState(f"cannot adapt session {session.id} in state {session.state}")
    kbps, codec = target_parameters(directive, session, codecs)
    adapting = transition(session, "adapt_begin")
    if kbps != session.current_bandwidth_kbps:
        try:
            broker.resize(session.id, kbps)
        except CapacityViolation as exc:
            err = AdaptationFailed(f"session {session.id}: {exc}")
            err.session = transition(adapting, "adapt_abort")
            raise err from None
    return replace(adapting, current_bandwidth_kbps=kbps, current_codec=codec)


def complete_adaptation(session: Session) -> Session:
    return transition(session, "adapt_done")


def apply_adaptation(
    directive: AdaptationDirective, session: Session, broker: BrokerInteraction, codecs: CodecTable
) -> Session:
    return complete_adaptation(begin_adaptation(directive, session, broker, codecs))


# -- context injection lines ------------------------------------------------

_LINE_KEYS = {"t", "entity", "attr", "value", "source"}


def parse_literal(text: str) -> Value:
    if text == "true":
        return True
    if text == "false":
        return False
    if re.fullmatch(r"-?\d+", text):
        return int(text)
    if re.fullmatch(r"-?\d+\.\d*(?:[eE][-+]?\d+)?|-?\d+[eE][-+]?\d+", text):
        return float(text)
    return text


_FIELD = re.compile(r'(\w+)=("(?:[^"\\]|\\.)*"|\S+)')


def parse_context_line(line: str, lineno: int | None = None) -> ContextRecord:
    """``t=<ms> entity=<kind>:<id> attr=<name> value=<literal> source=<id>``"""
    fields: dict[str, Value] = {}
    pos = 0
    text = line.strip()
    while pos < len(text):
        m = _FIELD.match(text, pos)
        if not m:
            raise ParseError(f"expected key=value at column {pos + 1}", lineno)
        key, raw = m.groups()
        if key in fields:
            raise ParseError(f"repeated key {key}", lineno)
        fields[key] = re.sub(r"\\(.)", r"\1", raw[1:-1]) if raw.startswith('"') else parse_literal(raw)
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    if set(fields) != _LINE_KEYS:
        raise ParseError(f"context line needs exactly the keys {sorted(_LINE_KEYS)}", lineno)
    kind, sep, entity = str(fields["entity"]).partition(":")
    if not sep or not entity:
        raise ParseError("entity must be <kind>:<id>", lineno)
    if not isinstance(fields["t"], int) or isinstance(fields["t"], bool):
        raise ParseError(f"bad timestamp {fields['t']!r}", lineno)
    try:
        return ContextRecord(entity, kind, str(fields["attr"]), fields["value"], str(fields["source"]), fields["t"])
    except ValidationError as exc:
        raise ParseError(str(exc), lineno) from None


def format_context_line(record: ContextRecord) -> str:
    v = record.value
    if isinstance(v, bool):
        text = "true" if v else "false"
    elif isinstance(v, str):
        plain = re.fullmatch(r"[\w.:@/+-]+", v) and parse_literal(v) == v
        text = v if plain else '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    else:
        text = repr(v)
    return (
        f"t={record.timestamp} entity={record.entity_kind}:{record.entity_id} "
        f"attr={record.attribute} value={text} source={record.source}"
    )
