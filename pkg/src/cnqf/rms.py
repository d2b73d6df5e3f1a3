"""Resource management: brokers, reservations, QoS mapping and RC enforcement."""

from __future__ import annotations

import copy
import enum
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from cnqf.errors import (
    BadParams,
    CapacityViolation,
    DuplicateAllocation,
    IllegalState,
    IllegalTransition,
    ScopeError,
    UnknownElement,
    UnknownLink,
    UnknownSession,
    UnmappedClass,
    ValidationError,
)
from cnqf.policy import Decision, FactBase, PolicySet, evaluate
from cnqf.topology import CORE, Link, Topology, find_path

SERVICE_CLASSES = ("conversational", "streaming", "interactive", "background")
DEFAULT_INACTIVITY_TIMEOUT_MS = 30000


@dataclass(frozen=True)
class BrokerRole:
    role: str
    scope: str

    def __post_init__(self):
        if self.role not in ("WARB", "FARB", "CNRB"):
            raise ValidationError(f"unknown broker role {self.role}")
        if (self.role == "CNRB") != (self.scope == CORE):
            raise ValidationError("the CNRB, and only the CNRB, serves the core")

    @property
    def entity_id(self) -> str:
        return "cnrb" if self.role == "CNRB" else f"{self.role.lower()}.{self.scope}"


def brokers_for(topology: Topology) -> dict[str, BrokerRole]:
    """One WARB/FARB per access network plus the single CNRB."""
    roles = {an.id: BrokerRole(an.broker_role, an.id) for an in topology.access_networks.values()}
    roles[CORE] = BrokerRole("CNRB", CORE)
    return roles


@dataclass(frozen=True)
class QoSRequest:
    session_id: str
    user_id: str
    src: str
    dst: str
    service_class: str
    bandwidth_kbps: int
    max_delay_ms: int = 1000
    max_loss_rate: float = 1.0
    media_kind: str | None = None
    codec: str | None = None

    def __post_init__(self):
        if isinstance(self.bandwidth_kbps, bool) or not isinstance(self.bandwidth_kbps, int) or self.bandwidth_kbps <= 0:
            raise ValidationError("bandwidth must be positive")
        if self.service_class not in SERVICE_CLASSES:
            raise ValidationError(f"unknown service class {self.service_class}")
        if self.max_delay_ms <= 0:
            raise ValidationError("max_delay_ms must be positive")
        if not 0.0 <= self.max_loss_rate <= 1.0:
            raise ValidationError("max_loss_rate must lie in [0, 1]")

    def facts(self) -> dict[str, Any]:
        out = {
            "session_id": self.session_id,
            "user_id": self.user_id,
            "src": self.src,
            "dst": self.dst,
            "service_class": self.service_class,
            "bandwidth_kbps": self.bandwidth_kbps,
            "max_delay_ms": self.max_delay_ms,
            "max_loss_rate": self.max_loss_rate,
        }
        if self.media_kind is not None:
            out["media_kind"] = self.media_kind
        if self.codec is not None:
            out["codec"] = self.codec
        return out


# -- session lifecycle ------------------------------------------------------

class SessionState(str, enum.Enum):
    REQUESTED = "REQUESTED"
    ADMITTED = "ADMITTED"
    ACTIVE = "ACTIVE"
    ADAPTING = "ADAPTING"
    TERMINATING = "TERMINATING"
    TERMINATED = "TERMINATED"
    REJECTED = "REJECTED"

    def __str__(self) -> str:
        return self.value


S = SessionState
TRANSITIONS: dict[tuple[SessionState, str], SessionState] = {
    (S.REQUESTED, "admitted"): S.ADMITTED,
    (S.REQUESTED, "rejected"): S.REJECTED,
    (S.ADMITTED, "activate"): S.ACTIVE,
    (S.ACTIVE, "adapt_begin"): S.ADAPTING,
    (S.ACTIVE, "terminate"): S.TERMINATING,
    (S.ADAPTING, "adapt_done"): S.ACTIVE,
    (S.ADAPTING, "adapt_abort"): S.ACTIVE,
    (S.ADAPTING, "terminate"): S.TERMINATING,
    (S.TERMINATING, "terminated"): S.TERMINATED,
}
LEGAL_EDGES = frozenset((src, dst) for (src, _), dst in TRANSITIONS.items())
TERMINAL = frozenset({S.TERMINATED, S.REJECTED})


@dataclass(frozen=True)
class Session:
    id: str
    request: QoSRequest
    state: SessionState = S.REQUESTED
    path: tuple[str, ...] = ()
    current_bandwidth_kbps: int = 0
    current_codec: str | None = None
    last_activity: int = 0

    @classmethod
    def open(cls, request: QoSRequest, now: int = 0) -> "Session":
        return cls(
            request.session_id,
            request,
            current_bandwidth_kbps=request.bandwidth_kbps,
            current_codec=request.codec,
            last_activity=now,
        )


def transition(session: Session, event: str) -> Session:
    try:
        new_state = TRANSITIONS[(session.state, event)]
    except KeyError:
        raise IllegalTransition(session.state.value, event) from None
    return replace(session, state=new_state)


def detect_inactivity(session: Session, now: int, timeout_ms: int = DEFAULT_INACTIVITY_TIMEOUT_MS) -> bool:
    if session.state not in (S.ACTIVE, S.ADAPTING):
        raise IllegalState(f"inactivity check on session {session.id} in state {session.state}")
    return now - session.last_activity >= timeout_ms


# -- reservation ledger -----------------------------------------------------

@dataclass(frozen=True)
class Allocation:
    links: tuple[str, ...]
    kbps: int


class ReservationLedger:
    """Per-link bandwidth bookkeeping for one broker scope.

    Every link of the scope is always present in ``reserved`` (zero when
    idle) so that serialisation is stable across reserve/release cycles.
    """

    def __init__(self, capacities: Mapping[str, int], scope: str = CORE):
        self.scope = scope
        self.capacities = dict(capacities)
        self.reserved = {lid: 0 for lid in sorted(self.capacities)}
        self.allocations: dict[str, Allocation] = {}

    @classmethod
    def for_scope(cls, topology: Topology, scope: str) -> "ReservationLedger":
        return cls(topology.scope_links(scope), scope)

    def __contains__(self, link_id: str) -> bool:
        return link_id in self.capacities

    def reserved_kbps(self, link_id: str) -> int:
        try:
            return self.reserved[link_id]
        except KeyError:
            raise UnknownLink(f"link {link_id} outside ledger scope {self.scope}") from None

    def residual(self, link_id: str) -> int:
        reserved = self.reserved_kbps(link_id)
        return self.capacities[link_id] - reserved

    def _check_links(self, links: Sequence[str]) -> tuple[str, ...]:
        if len(set(links)) != len(links):
            raise ValidationError("path repeats a link")
        for lid in links:
            if lid not in self.capacities:
                raise UnknownLink(f"link {lid} outside ledger scope {self.scope}")
        return tuple(links)

    def first_violation(self, links: Iterable[str], kbps: int, exclude: str | None = None) -> str | None:
        """First link that cannot carry ``kbps`` more (after dropping ``exclude``'s allocation)."""
        freed = self.allocations.get(exclude) if exclude else None
        for lid in links:
            current = self.reserved_kbps(lid)
            if freed is not None and lid in freed.links:
                current -= freed.kbps
            if current + kbps > self.capacities[lid]:
                return lid
        return None

    def reserve(self, session_id: str, links: Sequence[str], kbps: int) -> "ReservationLedger":
        if isinstance(kbps, bool) or not isinstance(kbps, int) or kbps <= 0:
            raise ValidationError("bandwidth must be positive")
        if session_id in self.allocations:
            raise DuplicateAllocation(f"session {session_id} already holds an allocation")
        links = self._check_links(links)
        bad = self.first_violation(links, kbps)
        if bad is not None:
            raise CapacityViolation(f"reserving {kbps} kbps would exceed capacity of {bad}")
        for lid in links:
            self.reserved[lid] += kbps
        self.allocations[session_id] = Allocation(links, kbps)
        return self

    def release(self, session_id: str) -> Allocation:
        try:
            alloc = self.allocations.pop(session_id)
        except KeyError:
            raise UnknownSession(f"no allocation for session {session_id}") from None
        for lid in alloc.links:
            self.reserved[lid] -= alloc.kbps
        return alloc

    def resize(self, session_id: str, kbps: int, links: Sequence[str] | None = None) -> Allocation:
        """Swap a session's allocation for a new size (and optionally route).

        Either fully applied or not at all; raises CapacityViolation when the
        new allocation does not fit. Returns the previous allocation.
        """
        if session_id not in self.allocations:
            raise UnknownSession(f"no allocation for session {session_id}")
        old = self.allocations[session_id]
        new_links = old.links if links is None else self._check_links(links)
        if isinstance(kbps, bool) or not isinstance(kbps, int) or kbps <= 0:
            raise ValidationError("bandwidth must be positive")
        bad = self.first_violation(new_links, kbps, exclude=session_id)
        if bad is not None:
            raise CapacityViolation(f"resizing to {kbps} kbps would exceed capacity of {bad}")
        self.release(session_id)
        self.reserve(session_id, new_links, kbps)
        return old

    def check_invariants(self) -> None:
        expected = {lid: 0 for lid in self.capacities}
        for alloc in self.allocations.values():
            for lid in alloc.links:
                expected[lid] += alloc.kbps
        for lid, cap in self.capacities.items():
            if self.reserved[lid] != expected[lid]:
                raise AssertionError(f"{self.scope}: reserved {self.reserved[lid]} on {lid} != allocations {expected[lid]}")
            if not 0 <= self.reserved[lid] <= cap:
                raise AssertionError(f"{self.scope}: reserved {self.reserved[lid]} on {lid} exceeds capacity {cap}")

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "reserved": dict(sorted(self.reserved.items())),
            "allocations": {
                sid: {"links": list(a.links), "kbps": a.kbps} for sid, a in sorted(self.allocations.items())
            },
        }

    def serialize(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def copy(self) -> "ReservationLedger":
        return copy.deepcopy(self)

    def is_empty(self) -> bool:
        return not self.allocations and not any(self.reserved.values())


def reserve(ledger: ReservationLedger, session_id: str, path: Sequence[Link | str], kbps: int) -> ReservationLedger:
    return ledger.reserve(session_id, [l.id if isinstance(l, Link) else l for l in path], kbps)


def release(ledger: ReservationLedger, session_id: str) -> ReservationLedger:
    ledger.release(session_id)
    return ledger


def serialize_ledgers(ledgers: Mapping[str, ReservationLedger]) -> bytes:
    return json.dumps(
        {scope: ledgers[scope].to_dict() for scope in sorted(ledgers)}, sort_keys=True, separators=(",", ":")
    ).encode()


# -- QoS class mapping ------------------------------------------------------

def _data_text(name: str) -> str:
    return resources.files("cnqf.data").joinpath(name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class QoSMappingTable:
    entries: Mapping[tuple[str, str], int]
    # service class -> L2 class per technology
    l2_classes: Mapping[str, Mapping[str, str]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, int]], l2_classes: Mapping | None = None) -> "QoSMappingTable":
        entries = {}
        for tech, classes in data.items():
            for l2, dscp in classes.items():
                if isinstance(dscp, bool) or not isinstance(dscp, int) or not 0 <= dscp <= 63:
                    raise ValidationError(f"dscp for ({tech}, {l2}) must be an integer in 0..63")
                entries[(tech, l2)] = dscp
        return cls(entries, dict(l2_classes or {}))

    @classmethod
    def load(cls, path: str | Path, l2_path: str | Path | None = None) -> "QoSMappingTable":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        l2 = json.loads(Path(l2_path).read_text(encoding="utf-8")) if l2_path else json.loads(_data_text("l2_classes.json"))
        return cls.from_dict(data, l2)

    @classmethod
    def default(cls) -> "QoSMappingTable":
        return cls.from_dict(json.loads(_data_text("qos_mapping.json")), json.loads(_data_text("l2_classes.json")))

    def l2_class(self, technology: str, service_class: str) -> str:
        """L2 scheduling class used for a service class on ``technology``."""
        return self.l2_classes.get(technology, {}).get(service_class, service_class)


def map_qos_class(table: QoSMappingTable, technology: str, l2_class: str) -> int:
    try:
        return table.entries[(technology, l2_class)]
    except KeyError:
        raise UnmappedClass(f"no DSCP mapping for ({technology}, {l2_class})") from None


# -- resource controller enforcement ----------------------------------------

CONFIG_OPS = ("set_dscp", "set_route", "set_queue_weight", "clear_session")
_SECTION = {"set_dscp": "dscp", "set_route": "route", "set_queue_weight": "queue"}


@dataclass(frozen=True)
class ConfigCommand:
    target: str
    op: str
    params: Mapping[str, Any]
    issued_by: str
    cause: str

    def __post_init__(self):
        if self.op not in CONFIG_OPS:
            raise BadParams(f"unknown configuration op {self.op}")
        if not self.cause:
            raise BadParams("configuration command without a causing decision")


RcStore = dict  # element id -> section -> session id -> value


def _check_params(cmd: ConfigCommand, topology: Topology) -> Any:
    session = cmd.params.get("session")
    if not isinstance(session, str) or not session:
        raise BadParams(f"{cmd.op} needs a session")
    if cmd.op == "set_dscp":
        dscp = cmd.params.get("dscp")
        if isinstance(dscp, bool) or not isinstance(dscp, int) or not 0 <= dscp <= 63:
            raise BadParams(f"dscp {dscp!r} out of range 0..63")
        return dscp
    if cmd.op == "set_queue_weight":
        kbps = cmd.params.get("kbps")
        if isinstance(kbps, bool) or not isinstance(kbps, int) or kbps <= 0:
            raise BadParams("queue weight kbps must be a positive integer")
        return kbps
    if cmd.op == "set_route":
        links = cmd.params.get("links")
        if not links:
            raise BadParams("route needs at least one link")
        if len(set(links)) != len(links):
            raise BadParams("route repeats a link")
        objs = []
        for lid in links:
            if lid not in topology.links:
                raise BadParams(f"route references unknown link {lid}")
            objs.append(topology.links[lid])
        for a, b in zip(objs, objs[1:]):
            if not set(a.endpoints) & set(b.endpoints):
                raise BadParams(f"route links {a.id} and {b.id} are not connected")
        return tuple(links)
    return None


def apply_config(store: RcStore, cmd: ConfigCommand, topology: Topology) -> str:
    """Apply ``cmd`` to ``store`` in place.

    Returns the trace kind: ``CONFIGURE`` when state changed, ``CONFIG_NOOP``
    when the command was already in effect.
    """
    if cmd.target not in topology.elements:
        raise UnknownElement(f"unknown element {cmd.target}")
    value = _check_params(cmd, topology)
    session = cmd.params["session"]
    element = store.setdefault(cmd.target, {"dscp": {}, "route": {}, "queue": {}})
    if cmd.op == "clear_session":
        changed = False
        for section in element.values():
            if session in section:
                del section[session]
                changed = True
        return "CONFIGURE" if changed else "CONFIG_NOOP"
    section = element[_SECTION[cmd.op]]
    if section.get(session) == value:
        return "CONFIG_NOOP"
    section[session] = value
    return "CONFIGURE"


# -- admission --------------------------------------------------------------

@dataclass(frozen=True)
class SegmentVerdict:
    scope: str
    admit: bool
    reason: str
    links: tuple[str, ...]
    violating_link: str | None = None
    decision: Decision | None = None

    @property
    def verdict(self) -> str:
        return "admit" if self.admit else "reject"


@dataclass(frozen=True)
class AdmissionDecision:
    verdict: str
    reason: str
    path: tuple[str, ...] = ()
    segments: tuple[SegmentVerdict, ...] = ()

    def __post_init__(self):
        if self.verdict == "admit" and not all(s.admit for s in self.segments):
            raise ValueError("admit requires every segment to admit")

    @property
    def admitted(self) -> bool:
        return self.verdict == "admit"


def admission_facts(request: QoSRequest, facts: FactBase | None = None, trigger: str = "admission") -> FactBase:
    facts = facts or FactBase()
    merged = {"trigger": trigger, **request.facts(), **facts.request}
    return FactBase(facts.context, facts.metric, merged, facts.snapshot_time)


def segment_admission(
    broker: BrokerRole,
    request: QoSRequest,
    segment_path: Sequence[Link | str],
    ledger: ReservationLedger,
    policy_set: PolicySet,
    facts: FactBase | None = None,
) -> SegmentVerdict:
    """Policy check first, then the additive capacity check on every link."""
    links = tuple(l.id if isinstance(l, Link) else l for l in segment_path)
    if ledger.scope != broker.scope:
        raise ScopeError(f"ledger of {ledger.scope} handed to broker of {broker.scope}")
    for lid in links:
        if lid not in ledger:
            raise ScopeError(f"link {lid} outside scope {broker.scope} of {broker.role}")
    decision = evaluate(policy_set, admission_facts(request, facts))
    if decision.rejects:
        reason = f"policy {decision.matched_policy}" if decision.matched_policy else "default reject"
        return SegmentVerdict(broker.scope, False, reason, links, None, decision)
    bad = ledger.first_violation(links, request.bandwidth_kbps)
    if bad is not None:
        return SegmentVerdict(broker.scope, False, f"insufficient capacity on {bad}", links, bad, decision)
    return SegmentVerdict(broker.scope, True, "ok", links, None, decision)


def split_segments(topology: Topology, path: Sequence[Link]) -> list[tuple[str, tuple[str, ...]]]:
    """Group path links by owning scope, in order of first appearance."""
    order: list[str] = []
    groups: dict[str, list[str]] = {}
    for link in path:
        scope = topology.link_scope(link)
        if scope not in groups:
            order.append(scope)
            groups[scope] = []
        groups[scope].append(link.id)
    return [(s, tuple(groups[s])) for s in order]


def end_to_end_admission(
    request: QoSRequest,
    topology: Topology,
    ledgers: Mapping[str, ReservationLedger],
    policy_sets: PolicySet | Mapping[str, PolicySet],
    facts: FactBase | None = None,
) -> AdmissionDecision:
    """Access broker checks its segment, the CNRB the core; reserve all or nothing.

    Segments are reserved one after another and compensated on the first
    reject, so a rejected request leaves every ledger as it found it.
    """
    roles = brokers_for(topology)
    if request.dst not in topology.elements:
        stub = SegmentVerdict(CORE, False, "inter-domain brokerage not supported", ())
        return AdmissionDecision("reject", stub.reason, (), (stub,))
    src_domain = topology.element(request.src).domain
    if src_domain == CORE:
        raise ValidationError(f"request source {request.src} is not in an access network")
    path = find_path(topology, request.src, request.dst)
    path_ids = tuple(l.id for l in path)

    verdicts: list[SegmentVerdict] = []
    reserved: list[str] = []
    for scope, links in split_segments(topology, path):
        pset = policy_sets if isinstance(policy_sets, PolicySet) else policy_sets[scope]
        v = segment_admission(roles[scope], request, links, ledgers[scope], pset, facts)
        verdicts.append(v)
        if not v.admit:
            for done in reversed(reserved):
                ledgers[done].release(request.session_id)
            return AdmissionDecision("reject", f"{roles[scope].role} {scope}: {v.reason}", path_ids, tuple(verdicts))
        ledgers[scope].reserve(request.session_id, links, request.bandwidth_kbps)
        reserved.append(scope)
    return AdmissionDecision("admit", "ok", path_ids, tuple(verdicts))


def resize_across(ledgers: Mapping[str, ReservationLedger], session_id: str, kbps: int) -> None:
    """Resize a session in every ledger holding it, all or nothing."""
    done: list[tuple[str, int]] = []
    for scope in sorted(ledgers):
        ledger = ledgers[scope]
        if session_id not in ledger.allocations:
            continue
        try:
            old = ledger.resize(session_id, kbps)
        except CapacityViolation:
            for s, prev in reversed(done):
                ledgers[s].resize(session_id, prev)
            raise
        done.append((scope, old.kbps))
    if not done:
        raise UnknownSession(f"no allocation for session {session_id}")
