"""Measurement and monitoring: simulated passive polls, aggregation, SLAs, thresholds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from cnqf.errors import ParseError, UnknownTarget, UnresolvedScope, ValidationError
from cnqf.topology import Link, Topology

METRICS = ("utilization", "throughput_kbps", "delay_ms", "loss_rate", "availability")
DEFAULT_POLL_INTERVAL_MS = 1000
DEFAULT_HIGH_WATERMARK = 0.8
DEFAULT_LOW_WATERMARK = 0.6


@dataclass(frozen=True)
class MeasurementRecord:
    monitor_id: str
    target: str
    metric: str
    value: float
    timestamp: int

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValidationError(f"unknown metric {self.metric}")
        if self.metric in ("utilization", "loss_rate") and not 0.0 <= self.value <= 1.0:
            raise ValidationError(f"{self.metric} {self.value} outside [0, 1]")
        if self.metric == "availability" and self.value not in (0, 1):
            raise ValidationError("availability must be 0 or 1")


def link_metric(link: Link, reserved_kbps: int, background_kbps: int, metric: str) -> float:
    offered = reserved_kbps + background_kbps
    cap = link.capacity_kbps
    if metric == "utilization":
        return min(max(offered / cap, 0.0), 1.0)
    if metric == "throughput_kbps":
        return float(min(offered, cap))
    if metric == "loss_rate":
        return (offered - cap) / offered if offered > cap else 0.0
    if metric == "delay_ms":
        # propagation delay inflated by a single-server queueing factor
        u = min(offered / cap, 0.99)
        return link.latency_ms / (1.0 - u)
    return 1.0


def poll(
    monitor_id: str,
    target: Link | str,
    ledger,
    background_load_kbps: int,
    t: int,
    metric: str = "utilization",
) -> MeasurementRecord:
    """One simulated passive reading of ``metric`` on a link (or element)."""
    if isinstance(target, Link):
        value = link_metric(target, ledger.reserved_kbps(target.id), background_load_kbps, metric)
        return MeasurementRecord(monitor_id, target.id, metric, value, t)
    if metric != "availability":
        raise ValidationError(f"elements only report availability, not {metric}")
    return MeasurementRecord(monitor_id, target, metric, 1.0, t)


@dataclass
class NetworkMonitor:
    """Monitor for one scope: an access network id or ``core``."""

    monitor_id: str
    scope: str
    topology: Topology

    def targets(self) -> list[str]:
        return sorted(self.topology.scope_links(self.scope))

    def poll(self, target: str, ledger, background_kbps: int, t: int, metric: str = "utilization") -> MeasurementRecord:
        link = self.topology.links.get(target)
        if link is None or self.topology.link_scope(link) != self.scope:
            raise UnknownTarget(f"{target} is not monitored by {self.monitor_id}")
        return poll(self.monitor_id, link, ledger, background_kbps, t, metric)


# -- aggregation ------------------------------------------------------------

@dataclass(frozen=True)
class Stats:
    mean: float
    min: float
    max: float
    count: int


@dataclass(frozen=True)
class AggregateReport:
    window: tuple[int, int]
    stats: Mapping[tuple[str, str], Stats] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.stats)

    def get(self, target: str, metric: str) -> Stats | None:
        return self.stats.get((target, metric))

    def merge(self, other: "AggregateReport") -> "AggregateReport":
        """Combine reports over disjoint windows (counts and extrema compose)."""
        out = dict(self.stats)
        for key, b in other.stats.items():
            a = out.get(key)
            if a is None:
                out[key] = b
                continue
            n = a.count + b.count
            mean = (a.mean * a.count + b.mean * b.count) / n
            lo, hi = min(a.min, b.min), max(a.max, b.max)
            out[key] = Stats(min(max(mean, lo), hi), lo, hi, n)
        window = (min(self.window[0], other.window[0]), max(self.window[1], other.window[1]))
        return AggregateReport(window, dict(sorted(out.items())))


def aggregate(records: Iterable[MeasurementRecord], window: tuple[int, int]) -> AggregateReport:
    """Per (target, metric) statistics over records with timestamp in (start, end]."""
    start, end = window
    buckets: dict[tuple[str, str], list[float]] = {}
    for r in records:
        if start < r.timestamp <= end:
            buckets.setdefault((r.target, r.metric), []).append(r.value)
    stats = {}
    for key in sorted(buckets):
        vals = buckets[key]
        lo, hi = min(vals), max(vals)
        mean = math.fsum(vals) / len(vals)
        stats[key] = Stats(min(max(mean, lo), hi), lo, hi, len(vals))
    return AggregateReport((start, end), stats)


class CentralMonitor:
    """Aggregating server: collects records from all monitors, answers queries."""

    def __init__(self):
        self.records: list[MeasurementRecord] = []

    def add(self, records: Iterable[MeasurementRecord]) -> None:
        self.records.extend(records)

    def report(self, window: tuple[int, int]) -> AggregateReport:
        return aggregate(self.records, window)


# -- SLA compliance ---------------------------------------------------------

# target name -> (metric, comparison)
SLA_TARGETS = {
    "max_delay_ms": ("delay_ms", "max"),
    "min_throughput_kbps": ("throughput_kbps", "min"),
    "max_loss_rate": ("loss_rate", "max"),
    "min_availability": ("availability", "min"),
}


@dataclass(frozen=True)
class SLA:
    sla_id: str
    scope: str
    targets: Mapping[str, float]

    def __post_init__(self):
        if not self.targets:
            raise ValidationError(f"SLA {self.sla_id} has no targets")
        for name in self.targets:
            if name not in SLA_TARGETS:
                raise ValidationError(f"unknown SLA target {name}")


@dataclass(frozen=True)
class ComplianceItem:
    target: str
    sla_target: str
    limit: float
    mean: float
    passed: bool


@dataclass(frozen=True)
class ComplianceReport:
    sla_id: str
    items: tuple[ComplianceItem, ...]

    @property
    def passed(self) -> bool:
        return all(i.passed for i in self.items)


def evaluate_sla(report: AggregateReport, sla: SLA, binding: Mapping[str, Sequence[str]]) -> ComplianceReport:
    items = []
    for target in sorted(binding.get(sla.scope, ())):
        for name in sorted(sla.targets):
            metric, kind = SLA_TARGETS[name]
            stats = report.get(target, metric)
            if stats is None:
                continue
            limit = sla.targets[name]
            ok = stats.mean <= limit if kind == "max" else stats.mean >= limit
            items.append(ComplianceItem(target, name, limit, stats.mean, ok))
    if not items:
        raise UnresolvedScope(f"SLA {sla.sla_id}: scope {sla.scope} resolves to no measured targets")
    return ComplianceReport(sla.sla_id, tuple(items))


# -- threshold eventing -----------------------------------------------------

@dataclass(frozen=True)
class ThresholdRule:
    metric: str
    target: str  # link/element id, or "*" for every target
    high: float = DEFAULT_HIGH_WATERMARK
    low: float = DEFAULT_LOW_WATERMARK
    raise_event: str = "CONGESTION_RAISED"
    clear_event: str = "CONGESTION_CLEARED"

    def __post_init__(self):
        if not self.low < self.high:
            raise ValidationError(f"hysteresis band empty: low {self.low} >= high {self.high}")

    def matches(self, record: MeasurementRecord) -> bool:
        return record.metric == self.metric and self.target in ("*", record.target)


@dataclass(frozen=True)
class ThresholdEvent:
    kind: str
    target: str
    metric: str
    value: float
    timestamp: int


def check_thresholds(
    record: MeasurementRecord, rules: Sequence[ThresholdRule], raised: set
) -> list[ThresholdEvent]:
    """Hysteresis eventing; ``raised`` holds (rule, target) pairs and is updated in place."""
    events = []
    for rule in rules:
        if not rule.matches(record):
            continue
        key = (rule, record.target)
        if record.value >= rule.high and key not in raised:
            raised.add(key)
            events.append(ThresholdEvent(rule.raise_event, record.target, record.metric, record.value, record.timestamp))
        elif record.value <= rule.low and key in raised:
            raised.discard(key)
            events.append(ThresholdEvent(rule.clear_event, record.target, record.metric, record.value, record.timestamp))
    return events


def fmt_number(value: float) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if math.isfinite(value) and value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return format(value, ".6g")


def format_measurement(record: MeasurementRecord) -> str:
    return (
        f"t={record.timestamp}\tmonitor={record.monitor_id}\ttarget={record.target}"
        f"\tmetric={record.metric}\tvalue={fmt_number(record.value)}"
    )


def parse_measurement(line: str) -> MeasurementRecord:
    try:
        fields = dict(part.split("=", 1) for part in line.rstrip("\n").split("\t"))
        return MeasurementRecord(
            fields["monitor"], fields["target"], fields["metric"], float(fields["value"]), int(fields["t"])
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ParseError(f"malformed measurement line: {line.strip()!r}") from None
