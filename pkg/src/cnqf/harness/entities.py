"""Harness entities: one object per functional entity, driven by messages.

Every entity only mutates its own state. Cross-entity effects travel as
messages through the engine; monitors read broker ledgers and the network's
background load read-only, as a passive measurement would.
"""

from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, field, replace
from typing import Any

from cnqf.cas import (
    AdaptationDirective,
    CodecTable,
    ContextRecord,
    ContextStore,
    begin_adaptation,
    complete_adaptation,
    congestion_rules,
    infer,
    select_codec,
    target_parameters,
)
from cnqf.errors import (
    AdaptationFailed,
    BadParams,
    CapacityViolation,
    NoFeasibleCodec,
    NoPath,
    UnknownElement,
    UnresolvedScope,
    ValidationError,
)
from cnqf.harness.engine import Engine, Entity, Event
from cnqf.mms import SLA, CentralMonitor, NetworkMonitor, ThresholdRule, check_thresholds, evaluate_sla
from cnqf.policy import Decision, FactBase, PolicySet, evaluate
from cnqf.rms import (
    BrokerRole,
    ConfigCommand,
    QoSMappingTable,
    QoSRequest,
    ReservationLedger,
    Session,
    SessionState,
    apply_config,
    brokers_for,
    detect_inactivity,
    map_qos_class,
    segment_admission,
    split_segments,
    transition,
)
from cnqf.topology import CORE, Topology, find_path

POLLED_METRICS = ("utilization", "throughput_kbps", "delay_ms", "loss_rate")
UNBOUNDED_KBPS = 10**9

# request(...) fields brokers put in front of the PDP
REQUEST_FIELDS = frozenset({
    "trigger", "entity", "attribute", "value", "session", "session_id", "user_id", "src", "dst",
    "service_class", "bandwidth_kbps", "max_delay_ms", "max_loss_rate", "media_kind", "codec",
})


@dataclass
class WorldConfig:
    latency_ms: int = 1
    poll_interval_ms: int = 1000
    monitoring: bool = False
    inactivity_timeout_ms: int | None = 30000
    inactivity_check_ms: int = 1000
    sustain_windows: int = 2
    high_watermark: float = 0.8
    low_watermark: float = 0.6
    horizon_ms: int | None = None
    sla_check_ms: int | None = None


class World:
    """Registry tying entities to the shared, read-only configuration."""

    def __init__(
        self,
        topology: Topology,
        policies: PolicySet,
        qos_table: QoSMappingTable,
        codecs: CodecTable,
        config: WorldConfig,
        seed: int = 0,
        slas: list[tuple[SLA, dict]] | None = None,
    ):
        self.topology = topology
        self.policies = policies
        self.qos_table = qos_table
        self.codecs = codecs
        self.config = config
        self.rng = random.Random(seed)
        self.engine = Engine(config.latency_ms, config.horizon_ms)
        self.roles = brokers_for(topology)
        self.net = self.engine.add(Network(self))
        self.brokers: dict[str, Broker] = {}
        self.rcs: dict[str, Controller] = {}
        self.monitors: dict[str, Monitor] = {}
        self.cafs: dict[str, ContextFunction] = {}
        self.clients: dict[str, QosClient] = {}
        for scope, role in self.roles.items():
            cls = CoreBroker if scope == CORE else AccessBroker
            self.brokers[scope] = self.engine.add(cls(self, role))
            self.rcs[scope] = self.engine.add(Controller(self, scope))
            self.monitors[scope] = self.engine.add(Monitor(self, scope))
            if scope != CORE:
                self.cafs[scope] = self.engine.add(ContextFunction(self, scope))
        self.ads = self.engine.add(AdaptationServer(self))
        self.cmm = self.engine.add(CentralMonitorEntity(self, slas or []))

    def broker_id(self, scope: str) -> str:
        return self.roles[scope].entity_id

    def scope_of(self, element_id: str) -> str:
        return self.topology.element(element_id).domain

    def client(self, user_id: str) -> "QosClient":
        if user_id not in self.clients:
            self.clients[user_id] = self.engine.add(QosClient(self, user_id))
        return self.clients[user_id]

    def ledgers(self) -> dict[str, ReservationLedger]:
        return {scope: b.ledger for scope, b in self.brokers.items()}

    def sessions(self) -> dict[str, Session]:
        out = {}
        for b in self.brokers.values():
            if isinstance(b, AccessBroker):
                out.update(b.sessions)
        return out

    def start(self) -> None:
        cfg = self.config
        if cfg.monitoring:
            for scope in sorted(self.monitors):
                self.monitors[scope].timer(cfg.poll_interval_ms, "POLL")
        if cfg.sla_check_ms is not None:
            self.cmm.timer(cfg.sla_check_ms, "SLA_CHECK")


def _decision_detail(decision: Decision) -> dict[str, Any]:
    return {
        "policy": decision.matched_policy,
        "actions": [a.text() for a in decision.actions],
        "default": decision.default_applied,
    }


class Network(Entity):
    """Physical network environment: background (unreserved) load per link."""

    def __init__(self, world: World):
        super().__init__("net")
        self.world = world
        self.background: dict[str, int] = {}

    def on_load_change(self, ev: Event) -> None:
        link, kbps = ev.payload["link"], ev.payload["kbps"]
        self.background[link] = kbps
        self.record("LOAD_CHANGE", link=link, kbps=kbps)

    def on_random_load(self, ev: Event) -> None:
        p = ev.payload
        kbps = self.world.rng.randint(p["min_kbps"], p["max_kbps"])
        self.background[p["link"]] = kbps
        self.record("LOAD_CHANGE", link=p["link"], kbps=kbps, random=True)
        nxt = self.now + p["every_ms"]
        if nxt <= p["until"]:
            self.timer(nxt, "RANDOM_LOAD", **p)


class QosClient(Entity):
    """QoS client on a user's device: signals requests and terminations."""

    def __init__(self, world: World, user_id: str):
        super().__init__(f"client.{user_id}")
        self.world = world
        self.user_id = user_id
        self.scopes: dict[str, str] = {}

    def on_request(self, ev: Event) -> None:
        req = ev.payload["request"]
        try:
            scope = self.world.scope_of(req["src"])
        except UnknownElement:
            self.record("REQUEST_INVALID", session=req.get("session_id"), error=f"unknown source {req['src']}")
            return
        if scope == CORE:
            self.record("REQUEST_INVALID", session=req.get("session_id"), error="source not in an access network")
            return
        self.scopes[req["session_id"]] = scope
        self.send(self.world.broker_id(scope), "QOS_REQUEST", request=req, signaled=True)

    def on_grant(self, ev: Event) -> None:
        self.send(ev.sender, "SESSION_START", session=ev.payload["session"])

    def on_deny(self, ev: Event) -> None:
        pass

    def on_end(self, ev: Event) -> None:
        sid = ev.payload["session"]
        if sid in self.scopes:
            self.send(self.world.broker_id(self.scopes[sid]), "TERMINATE", session=sid)

    def on_activity(self, ev: Event) -> None:
        sid = ev.payload["session"]
        if sid in self.scopes:
            self.send(f"rc.{self.scopes[sid]}", "ACTIVITY", session=sid)


# -- brokers ----------------------------------------------------------------

class Broker(Entity):
    """Resource broker: PDP for its scope and owner of the scope's ledger."""

    def __init__(self, world: World, role: BrokerRole):
        super().__init__(role.entity_id)
        self.world = world
        self.role = role
        self.scope = role.scope
        self.ledger = ReservationLedger.for_scope(world.topology, role.scope)
        self.policies = world.policies
        self.context_view: dict[tuple[str, str], Any] = {}
        self.metric_view: dict[tuple[str, str], float] = {}

    def facts(self, request: dict[str, Any] | None = None) -> FactBase:
        return FactBase(self.context_view, self.metric_view, request or {}, self.now)

    def record_decision(self, decision: Decision, cause: str | None, purpose: str, **extra: Any) -> str:
        did = self.engine.new_id("d")
        self.record("DECISION", id=did, cause=cause, purpose=purpose, **_decision_detail(decision), **extra)
        return did

    def spare_for(self, session_id: str, links) -> int:
        alloc = self.ledger.allocations.get(session_id)
        own = alloc.kbps if alloc else 0
        spare = UNBOUNDED_KBPS
        for lid in links:
            back = own if alloc and lid in alloc.links else 0
            spare = min(spare, self.ledger.capacities[lid] - self.ledger.reserved[lid] + back)
        return spare

    # remote side of the end-to-end protocol

    def on_admission_query(self, ev: Event) -> None:
        p = ev.payload
        req = QoSRequest(**p["request"])
        base = dict(session=req.session_id, scope=self.scope, purpose="admission", kbps=req.bandwidth_kbps, user=req.user_id)
        if p.get("external"):
            reason = "inter-domain brokerage not supported"
            self.record("SEGMENT_VERDICT", links=[], verdict="reject", reason=reason, **base)
            self.send(ev.sender, "ADMISSION_REPLY", txn=p["txn"], scope=self.scope, verdict="reject", reason=reason)
            return
        links = tuple(p["links"])
        v = segment_admission(self.role, req, links, self.ledger, self.policies, self.facts())
        did = self.record_decision(v.decision, p["cause"], "admission", session=req.session_id)
        self.record("SEGMENT_VERDICT", links=list(links), verdict=v.verdict, reason=v.reason, decision=did, **base)
        if v.admit:
            self.ledger.reserve(req.session_id, links, req.bandwidth_kbps)
            self.record("RESERVE", session=req.session_id, scope=self.scope, links=list(links), kbps=req.bandwidth_kbps)
        self.send(ev.sender, "ADMISSION_REPLY", txn=p["txn"], scope=self.scope, verdict=v.verdict, reason=v.reason)

    def on_rollback(self, ev: Event) -> None:
        self._release(ev.payload["session"], "rollback")

    def on_release_update(self, ev: Event) -> None:
        self._release(ev.payload["session"], "update")

    def _release(self, sid: str, reason: str) -> None:
        if sid in self.ledger.allocations:
            alloc = self.ledger.release(sid)
            self.record("RELEASE", session=sid, scope=self.scope, kbps=alloc.kbps, reason=reason)

    def on_availability_query(self, ev: Event) -> None:
        p = ev.payload
        alloc = self.ledger.allocations.get(p["session"])
        spare = self.spare_for(p["session"], alloc.links if alloc else ())
        self.send(ev.sender, "AVAILABILITY_REPLY", txn=p["txn"], scope=self.scope, spare=spare)

    def on_resize_query(self, ev: Event) -> None:
        p = ev.payload
        sid, kbps = p["session"], p["kbps"]
        alloc = self.ledger.allocations.get(sid)
        if alloc is None:
            self.send(ev.sender, "RESIZE_REPLY", txn=p["txn"], scope=self.scope, verdict="reject", reason="unknown session")
            return
        bad = self.ledger.first_violation(alloc.links, kbps, exclude=sid)
        reason = "ok" if bad is None else f"insufficient capacity on {bad}"
        verdict = "admit" if bad is None else "reject"
        self.record(
            "SEGMENT_VERDICT", session=sid, scope=self.scope, purpose="resize", links=list(alloc.links),
            kbps=kbps, prev=alloc.kbps, verdict=verdict, reason=reason,
        )
        if bad is None:
            self.ledger.resize(sid, kbps)
            self.record("RESIZE", session=sid, scope=self.scope, kbps=kbps, prev=alloc.kbps)
        self.send(ev.sender, "RESIZE_REPLY", txn=p["txn"], scope=self.scope, verdict=verdict, reason=reason)


class CoreBroker(Broker):
    def on_cnrb_update(self, ev: Event) -> None:
        sid = ev.payload["session"]
        alloc = self.ledger.allocations.get(sid)
        if alloc is not None:
            self.ledger.release(sid)
        self.record("CNRB_UPDATE", session=sid, scope=self.scope, kbps=alloc.kbps if alloc else 0, cause=ev.payload.get("cause"))


@dataclass
class _Txn:
    kind: str
    session: str
    remaining: list = field(default_factory=list)
    done: list = field(default_factory=list)
    decision: str | None = None
    cause: str | None = None
    external: bool = False
    available: int = UNBOUNDED_KBPS
    waiting: set = field(default_factory=set)
    kbps: int = 0
    prev: int = 0
    prev_codec: str | None = None
    directive: AdaptationDirective | None = None


class _OwnLedgerResize:
    """Broker interaction for the initiating broker's own segment."""

    def __init__(self, broker: "AccessBroker"):
        self.broker = broker

    def resize(self, session_id: str, kbps: int) -> None:
        b = self.broker
        alloc = b.ledger.allocations.get(session_id)
        if alloc is None:
            return  # nothing reserved locally, e.g. source and destination coincide
        bad = b.ledger.first_violation(alloc.links, kbps, exclude=session_id)
        b.record(
            "SEGMENT_VERDICT", session=session_id, scope=b.scope, purpose="resize", links=list(alloc.links),
            kbps=kbps, prev=alloc.kbps, verdict="admit" if bad is None else "reject",
            reason="ok" if bad is None else f"insufficient capacity on {bad}",
        )
        if bad is not None:
            raise CapacityViolation(f"insufficient capacity on {bad}")
        b.ledger.resize(session_id, kbps)
        b.record("RESIZE", session=session_id, scope=b.scope, kbps=kbps, prev=alloc.kbps)


class AccessBroker(Broker):
    """WARB or FARB: entry point for requests from its access network."""

    def __init__(self, world: World, role: BrokerRole):
        super().__init__(world, role)
        self.technology = world.topology.access_networks[role.scope].technology
        self.sessions: dict[str, Session] = {}
        self.txns: dict[str, _Txn] = {}
        self.awaiting_ack: dict[str, _Txn] = {}
        self.remote: dict[str, list[str]] = {}
        self.configured: dict[str, set[str]] = {}
        self.reply_to: dict[str, str] = {}
        self.admission_decision: dict[str, str] = {}
        self.rc = f"rc.{role.scope}"

    def _state(self, sid: str, event: str, **changes: Any) -> Session:
        old = self.sessions[sid]
        new = replace(transition(old, event), **changes)
        self.sessions[sid] = new
        self.record(
            f"SESSION_{new.state.value}", session=sid, prev=old.state.value, event=event,
            kbps=new.current_bandwidth_kbps, codec=new.current_codec,
        )
        return new

    def _configure(self, sid: str, target: str, op: str, cause: str, ack: bool = False, **params: Any) -> None:
        self.configured.setdefault(sid, set()).add(target)
        self.send(self.rc, "CONFIGURE", target=target, op=op, params={"session": sid, **params},
                  issued_by=self.id, cause=cause, ack=ack)

    # admission

    def on_qos_request(self, ev: Event) -> None:
        p = ev.payload
        rid = self.engine.new_id("r")
        try:
            req = QoSRequest(**p["request"])
        except (ValidationError, TypeError) as exc:
            self.record("REQUEST_INVALID", id=rid, session=p["request"].get("session_id"), error=str(exc))
            self.send(ev.sender, "DENY", session=p["request"].get("session_id"), reason=str(exc))
            return
        sid = req.session_id
        if sid in self.sessions:
            self.record("REQUEST_INVALID", id=rid, session=sid, error="duplicate session id")
            self.send(ev.sender, "DENY", session=sid, reason="duplicate session id")
            return
        self.record(
            "QOS_REQUEST", id=rid, session=sid, user=req.user_id, src=req.src, dst=req.dst,
            service_class=req.service_class, kbps=req.bandwidth_kbps, signaled=p.get("signaled", True),
            cause=p.get("cause"),
        )
        self.sessions[sid] = Session.open(req, self.now)
        self.reply_to[sid] = ev.sender
        topo = self.world.topology
        txn = _Txn("admission", sid, cause=rid)
        path_ids: tuple[str, ...] = ()
        if req.dst not in topo.elements:
            txn.external = True
            txn.remaining = [(CORE, ())]
            own_links: tuple[str, ...] = ()
        else:
            try:
                path = find_path(topo, req.src, req.dst)
            except NoPath:
                did = self.record_decision(Decision(None, (), True, "reject"), rid, "admission", session=sid)
                self._reject(sid, "no path", did)
                return
            path_ids = tuple(l.id for l in path)
            segs = split_segments(topo, path)
            if segs and segs[0][0] != self.scope:
                did = self.record_decision(Decision(None, (), True, "reject"), rid, "admission", session=sid)
                self._reject(sid, "source outside broker scope", did)
                return
            own_links = segs[0][1] if segs else ()
            txn.remaining = segs[1:]
        self.sessions[sid] = replace(self.sessions[sid], path=path_ids)

        v = segment_admission(self.role, req, own_links, self.ledger, self.policies, self.facts())
        did = self.record_decision(v.decision, rid, "admission", session=sid)
        txn.decision = did
        self.admission_decision[sid] = did
        self.record(
            "SEGMENT_VERDICT", session=sid, scope=self.scope, purpose="admission", links=list(own_links),
            kbps=req.bandwidth_kbps, user=req.user_id, verdict=v.verdict, reason=v.reason, decision=did,
        )
        if not v.admit:
            self._reject(sid, v.reason, did)
            return
        if own_links:
            self.ledger.reserve(sid, own_links, req.bandwidth_kbps)
            self.record("RESERVE", session=sid, scope=self.scope, links=list(own_links), kbps=req.bandwidth_kbps)
        self._advance_admission(txn)

    def _advance_admission(self, txn: _Txn) -> None:
        if not txn.remaining:
            self._admit(txn)
            return
        scope, links = txn.remaining[0]
        tid = self.engine.new_id("x")
        self.txns[tid] = txn
        target = self.world.broker_id(scope)
        session = self.sessions[txn.session]
        self.record("ADMISSION_QUERY", session=txn.session, to=target, scope=scope, links=list(links), txn=tid)
        self.send(target, "ADMISSION_QUERY", txn=tid, request=asdict(session.request), links=list(links),
                  cause=txn.cause, external=txn.external)

    def on_admission_reply(self, ev: Event) -> None:
        p = ev.payload
        txn = self.txns.pop(p["txn"])
        if p["verdict"] == "admit":
            txn.done.append(p["scope"])
            txn.remaining.pop(0)
            self._advance_admission(txn)
            return
        for scope in txn.done:
            self.send(self.world.broker_id(scope), "ROLLBACK", session=txn.session)
        self._release(txn.session, "rollback")
        self._reject(txn.session, f"{p['scope']}: {p['reason']}", txn.decision)

    def _admit(self, txn: _Txn) -> None:
        sid = txn.session
        session = self.sessions[sid]
        req = session.request
        self.remote[sid] = list(txn.done)
        self.record("ADMIT", session=sid, path=list(session.path), kbps=req.bandwidth_kbps, cause=txn.decision)
        self._state(sid, "admitted")
        dscp = self._dscp_for(req)
        self._configure(sid, req.src, "set_dscp", txn.decision, dscp=dscp)
        self.send(self.reply_to[sid], "GRANT", session=sid)

    def _dscp_for(self, req: QoSRequest) -> int:
        decision = evaluate(self.policies, FactBase(self.context_view, self.metric_view,
                                                    {"trigger": "admission", **req.facts()}))
        remark = decision.action("remark_dscp") if not decision.default_applied else None
        if remark is not None:
            return int(remark.params["dscp"])
        table = self.world.qos_table
        return map_qos_class(table, self.technology, table.l2_class(self.technology, req.service_class))

    def _reject(self, sid: str, reason: str, cause: str | None) -> None:
        self.record("REJECT", session=sid, reason=reason, cause=cause)
        self._state(sid, "rejected")
        self.send(self.reply_to[sid], "DENY", session=sid, reason=reason)

    def on_session_start(self, ev: Event) -> None:
        sid = ev.payload["session"]
        s = self.sessions.get(sid)
        if s is None or s.state is not SessionState.ADMITTED:
            self.record("SESSION_START_IGNORED", session=sid)
            return
        s = self._state(sid, "activate", last_activity=self.now)
        if self.world.config.inactivity_timeout_ms is not None:
            self.send(self.rc, "WATCH", session=s)

    # termination

    def on_terminate(self, ev: Event) -> None:
        sid = ev.payload["session"]
        s = self.sessions.get(sid)
        if s is None or s.state not in (SessionState.ACTIVE, SessionState.ADAPTING):
            self.record("TERMINATE_IGNORED", session=sid, state=s.state.value if s else None)
            return
        tid = self.engine.new_id("t")
        self.record("TERMINATE", id=tid, session=sid)
        self._teardown(sid, tid)

    def on_inactivity(self, ev: Event) -> None:
        sid = ev.payload["session"]
        s = self.sessions.get(sid)
        if s is None or s.state not in (SessionState.ACTIVE, SessionState.ADAPTING):
            return
        self._teardown(sid, ev.payload["cause"])

    def _teardown(self, sid: str, cause: str) -> None:
        self._state(sid, "terminate")
        did = self.engine.new_id("d")
        self.record("DECISION", id=did, cause=cause, purpose="teardown", policy=None, actions=["release"],
                    default=False, session=sid)
        self._release(sid, "terminate")
        for target in sorted(self.configured.pop(sid, ())):
            self._configure(sid, target, "clear_session", did)
        self.configured.pop(sid, None)
        for scope in self.remote.pop(sid, []):
            kind = "CNRB_UPDATE" if scope == CORE else "RELEASE_UPDATE"
            self.send(self.world.broker_id(scope), kind, session=sid, cause=did)
        self.awaiting_ack.pop(sid, None)
        self._state(sid, "terminated")

    # network-context reconfiguration

    def on_reconfig_request(self, ev: Event) -> None:
        p = ev.payload
        self.record("RECONFIG_REQUEST", entity=p["entity"], attribute=p["attribute"], value=p["value"], cause=p["cause"])
        self.context_view[(p["entity"], p["attribute"])] = p["value"]
        for target, metric, value in p.get("metrics", []):
            self.metric_view[(target, metric)] = value
        facts = self.facts({"trigger": "network_context", "entity": p["entity"],
                            "attribute": p["attribute"], "value": p["value"]})
        decision = evaluate(self.policies, facts)
        did = self.record_decision(decision, p["cause"], "reconfigure", entity=p["entity"])
        if decision.default_applied:
            return
        affected = sorted(sid for sid, s in self.sessions.items()
                          if s.state is SessionState.ACTIVE and p["entity"] in s.path)
        for action in decision.actions:
            for sid in affected:
                src = self.sessions[sid].request.src
                if action.kind == "reroute":
                    self._reroute(sid, did)
                elif action.kind == "remark_dscp":
                    self._configure(sid, src, "set_dscp", did, dscp=action.params["dscp"])
                elif action.kind == "reconfigure":
                    params = {k: v for k, v in action.params.items() if k in ("kbps", "dscp")}
                    self._configure(sid, action.params.get("target", src), action.params["op"], did, **params)

    def _reroute(self, sid: str, did: str) -> None:
        topo = self.world.topology
        s = self.sessions[sid]
        avoid = sorted(e for (e, a), v in self.context_view.items() if a == "congested" and v is True and e in topo.links)
        try:
            path = find_path(topo, s.request.src, s.request.dst, avoid)
        except NoPath:
            self.record("REROUTE_FAILED", session=sid, reason="no alternative path", cause=did)
            return
        new_ids = tuple(l.id for l in path)
        if new_ids == s.path:
            self.record("REROUTE_FAILED", session=sid, reason="no alternative path", cause=did)
            return
        old_segs = dict(split_segments(topo, [topo.links[l] for l in s.path]))
        new_segs = dict(split_segments(topo, path))
        old_own, new_own = old_segs.pop(self.scope, ()), new_segs.pop(self.scope, ())
        if old_segs != new_segs or not new_own:
            self.record("REROUTE_FAILED", session=sid, reason="route change outside broker scope", cause=did)
            return
        kbps = s.current_bandwidth_kbps
        bad = self.ledger.first_violation(new_own, kbps, exclude=sid)
        self.record(
            "SEGMENT_VERDICT", session=sid, scope=self.scope, purpose="reroute", links=list(new_own),
            prev_links=list(old_own), kbps=kbps, verdict="admit" if bad is None else "reject",
            reason="ok" if bad is None else f"insufficient capacity on {bad}",
        )
        if bad is not None:
            self.record("REROUTE_FAILED", session=sid, reason=f"insufficient capacity on {bad}", cause=did)
            return
        self.ledger.resize(sid, kbps, links=new_own)
        self.record("REROUTE", session=sid, scope=self.scope, links=list(new_own), prev_links=list(old_own),
                    path=list(new_ids), kbps=kbps, codec=s.current_codec, cause=did)
        self.sessions[sid] = replace(s, path=new_ids)
        self._configure(sid, s.request.src, "set_route", did, links=list(new_ids))

    # service adaptation

    def on_cas_notify(self, ev: Event) -> None:
        p = ev.payload
        self.record("CAS_NOTIFY", session=p.get("session"), user=p.get("user"), attribute=p["attribute"],
                    value=p["value"], cause=p["cause"])
        for entity, attr, value in p.get("context", []):
            self.context_view[(entity, attr)] = value
        if p.get("session") is not None:
            targets = [p["session"]]
        else:
            targets = sorted(sid for sid, s in self.sessions.items() if s.request.user_id == p.get("user"))
        handled = False
        for sid in targets:
            s = self.sessions.get(sid)
            if s is None or s.state is not SessionState.ACTIVE:
                continue
            handled = True
            self._adaptation_request(sid, p)
        if not handled:
            self.record("NOTIFY_IGNORED", session=p.get("session"), user=p.get("user"), reason="no active session")

    def _adaptation_request(self, sid: str, p: dict) -> None:
        s = self.sessions[sid]
        facts = self.facts({"trigger": "session_context", "session": sid, "attribute": p["attribute"],
                            "value": p["value"], **s.request.facts()})
        decision = evaluate(self.policies, facts)
        did = self.record_decision(decision, p["cause"], "adaptation", session=sid)
        act = None if decision.default_applied else decision.action("adapt_codec")
        if act is None:
            return
        alloc = self.ledger.allocations.get(sid)
        own = self.spare_for(sid, alloc.links if alloc else ())
        cap = p.get("capability")
        available = min(own, cap if isinstance(cap, int) and not isinstance(cap, bool) else UNBOUNDED_KBPS)
        txn = _Txn("availability", sid, decision=did, cause=p["cause"], available=available)
        txn.prev_codec = act.params.get("media", s.request.media_kind)
        remote = self.remote.get(sid, [])
        if not remote:
            self._params_ready(txn)
            return
        tid = self.engine.new_id("x")
        self.txns[tid] = txn
        txn.waiting = set(remote)
        for scope in remote:
            self.send(self.world.broker_id(scope), "AVAILABILITY_QUERY", txn=tid, session=sid)

    def on_availability_reply(self, ev: Event) -> None:
        p = ev.payload
        txn = self.txns.get(p["txn"])
        if txn is None:
            return
        txn.available = min(txn.available, p["spare"])
        txn.waiting.discard(p["scope"])
        if not txn.waiting:
            del self.txns[p["txn"]]
            self._params_ready(txn)

    def _params_ready(self, txn: _Txn) -> None:
        s = self.sessions.get(txn.session)
        if s is None or s.state is not SessionState.ACTIVE:
            self.record("NOTIFY_IGNORED", session=txn.session, reason="session no longer active")
            return
        media = txn.prev_codec
        self.record("QOS_PARAMS", session=txn.session, available_kbps=txn.available, media=media,
                    decision=txn.decision, cause=txn.cause)
        self.send(f"caf.{self.scope}", "QOS_PARAMS", session=txn.session, available_kbps=txn.available, media=media,
                  codec=s.current_codec, decision=txn.decision, cause=txn.cause, broker=self.id)

    def on_adapt_apply(self, ev: Event) -> None:
        directive = AdaptationDirective(**ev.payload["directive"])
        sid = directive.session_id
        s = self.sessions.get(sid)
        if s is None or s.state is not SessionState.ACTIVE:
            self.record("ADAPTATION_FAILED", session=sid, reason=f"illegal state {s.state.value if s else 'unknown'}",
                        cause=directive.cause)
            return
        kbps, _ = target_parameters(directive, s, self.world.codecs)
        try:
            adapting = begin_adaptation(directive, s, _OwnLedgerResize(self), self.world.codecs)
        except AdaptationFailed as exc:
            self.sessions[sid] = exc.session
            self.record("SESSION_ADAPTING", session=sid, prev="ACTIVE", event="adapt_begin",
                        kbps=s.current_bandwidth_kbps, codec=s.current_codec)
            self.record("ADAPTATION_FAILED", session=sid, reason=str(exc), cause=directive.cause)
            self.record("SESSION_ACTIVE", session=sid, prev="ADAPTING", event="adapt_abort",
                        kbps=s.current_bandwidth_kbps, codec=s.current_codec)
            return
        self.sessions[sid] = adapting
        self.record("SESSION_ADAPTING", session=sid, prev="ACTIVE", event="adapt_begin",
                    kbps=adapting.current_bandwidth_kbps, codec=adapting.current_codec)
        txn = _Txn("resize", sid, remaining=list(self.remote.get(sid, [])), kbps=kbps,
                   prev=s.current_bandwidth_kbps, prev_codec=s.current_codec, directive=directive)
        if kbps == s.current_bandwidth_kbps or not txn.remaining:
            self._commit_adaptation(txn)
        else:
            self._advance_resize(txn)

    def _advance_resize(self, txn: _Txn) -> None:
        tid = self.engine.new_id("x")
        self.txns[tid] = txn
        self.send(self.world.broker_id(txn.remaining[0]), "RESIZE_QUERY", txn=tid, session=txn.session, kbps=txn.kbps)

    def on_resize_reply(self, ev: Event) -> None:
        p = ev.payload
        txn = self.txns.pop(p["txn"], None)
        if txn is None:
            return
        s = self.sessions.get(txn.session)
        if s is None or s.state is not SessionState.ADAPTING:
            return
        if p["verdict"] == "admit":
            txn.done.append(txn.remaining.pop(0))
            if txn.remaining:
                self._advance_resize(txn)
            else:
                self._commit_adaptation(txn)
            return
        # upward resize refused downstream: undo the parts already grown
        for scope in txn.done:
            self.send(self.world.broker_id(scope), "RESIZE_QUERY", txn=self.engine.new_id("x"),
                      session=txn.session, kbps=txn.prev)
        if txn.session in self.ledger.allocations:
            old = self.ledger.resize(txn.session, txn.prev)
            self.record("RESIZE", session=txn.session, scope=self.scope, kbps=txn.prev, prev=old.kbps)
        self.record("ADAPTATION_FAILED", session=txn.session, reason=f"{p['scope']}: {p['reason']}",
                    cause=txn.directive.cause)
        self._state(txn.session, "adapt_abort", current_bandwidth_kbps=txn.prev, current_codec=txn.prev_codec)

    def _commit_adaptation(self, txn: _Txn) -> None:
        d = txn.directive
        s = self.sessions[txn.session]
        self.awaiting_ack[txn.session] = txn
        self._configure(txn.session, s.request.src, "set_queue_weight", d.decision or d.cause, ack=True,
                        kbps=s.current_bandwidth_kbps)

    def on_config_ack(self, ev: Event) -> None:
        sid = ev.payload["session"]
        txn = self.awaiting_ack.pop(sid, None)
        s = self.sessions.get(sid)
        if txn is None or s is None or s.state is not SessionState.ADAPTING:
            return
        self.record("ADAPTED", session=sid, kbps=s.current_bandwidth_kbps, codec=s.current_codec,
                    cause=txn.directive.cause)
        self.sessions[sid] = complete_adaptation(s)
        self.record("SESSION_ACTIVE", session=sid, prev="ADAPTING", event="adapt_done",
                    kbps=s.current_bandwidth_kbps, codec=s.current_codec)


# -- enforcement ------------------------------------------------------------

class Controller(Entity):
    """Resource controller: applies broker commands to network elements."""

    def __init__(self, world: World, scope: str):
        super().__init__(f"rc.{scope}")
        self.world = world
        self.scope = scope
        self.store: dict = {}
        self.watching: dict[str, Session] = {}
        self.checking = False

    def on_configure(self, ev: Event) -> None:
        p = ev.payload
        params = dict(p["params"])
        try:
            cmd = ConfigCommand(p["target"], p["op"], params, p["issued_by"], p["cause"])
            kind = apply_config(self.store, cmd, self.world.topology)
        except (BadParams, UnknownElement) as exc:
            self.record("CONFIG_ERROR", op=p["op"], target=p["target"], cause=p["cause"], error=str(exc))
            return
        self.record(kind, op=cmd.op, target=cmd.target, issued_by=cmd.issued_by, cause=cmd.cause, **params)
        if cmd.op == "clear_session":
            self.watching.pop(params["session"], None)
        if p.get("ack"):
            self.send(cmd.issued_by, "CONFIG_ACK", session=params["session"])

    def on_watch(self, ev: Event) -> None:
        session: Session = ev.payload["session"]
        self.watching[session.id] = session
        if not self.checking:
            self.checking = True
            self.timer(self.now + self.world.config.inactivity_check_ms, "INACTIVITY_CHECK")

    def on_activity(self, ev: Event) -> None:
        sid = ev.payload["session"]
        if sid in self.watching:
            self.watching[sid] = replace(self.watching[sid], last_activity=self.now)
            self.record("ACTIVITY", session=sid)

    def on_inactivity_check(self, ev: Event) -> None:
        timeout = self.world.config.inactivity_timeout_ms
        for sid in sorted(self.watching):
            session = self.watching[sid]
            if detect_inactivity(session, self.now, timeout):
                iid = self.engine.new_id("i")
                self.record("INACTIVITY_DETECTED", id=iid, session=sid, idle_ms=self.now - session.last_activity)
                self.send(self.world.broker_id(self.scope), "INACTIVITY", session=sid, cause=iid)
                del self.watching[sid]
        if self.watching:
            self.timer(self.now + self.world.config.inactivity_check_ms, "INACTIVITY_CHECK")
        else:
            self.checking = False

    def on_session_detected(self, ev: Event) -> None:
        req = ev.payload["request"]
        sid_rec = self.engine.new_id("sd")
        self.record("SESSION_DETECTED", id=sid_rec, session=req["session_id"], src=req["src"], dst=req["dst"],
                    kbps=req["bandwidth_kbps"])
        self.send(self.world.broker_id(self.scope), "QOS_REQUEST", request=req, signaled=False, cause=sid_rec)

    def on_grant(self, ev: Event) -> None:
        self.send(ev.sender, "SESSION_START", session=ev.payload["session"])

    def on_deny(self, ev: Event) -> None:
        self.record("SESSION_BLOCKED", session=ev.payload["session"], reason=ev.payload.get("reason"))


# -- monitoring -------------------------------------------------------------

class Monitor(Entity):
    """Network monitor for one scope; polls every link of the scope."""

    def __init__(self, world: World, scope: str):
        super().__init__(f"nm.{scope}")
        self.world = world
        self.scope = scope
        self.monitor = NetworkMonitor(self.id, scope, world.topology)
        cfg = world.config
        self.rules = [ThresholdRule("utilization", "*", cfg.high_watermark, cfg.low_watermark)]
        self.raised: set = set()

    def on_poll(self, ev: Event) -> None:
        ledger = self.world.brokers[self.scope].ledger
        background = self.world.net.background
        records, util, thresholds = [], [], {}
        for lid in self.monitor.targets():
            for metric in POLLED_METRICS:
                rec = self.monitor.poll(lid, ledger, background.get(lid, 0), self.now, metric)
                records.append(rec)
                if metric == "utilization":
                    util.append(rec)
                    self.record("MEASURE", target=lid, metric=metric, value=rec.value)
                    for tev in check_thresholds(rec, self.rules, self.raised):
                        tid = self.engine.new_id("th")
                        self.record(tev.kind, id=tid, target=tev.target, metric=tev.metric, value=tev.value)
                        thresholds[lid] = tid
        self.send("cmm", "MEASUREMENTS", records=records)
        if self.scope in self.world.cafs:
            self.send(f"caf.{self.scope}", "MEASUREMENTS", records=util, thresholds=thresholds)
        nxt = self.now + self.world.config.poll_interval_ms
        horizon = self.world.config.horizon_ms
        if horizon is None or nxt <= horizon:
            self.timer(nxt, "POLL")


class CentralMonitorEntity(Entity):
    def __init__(self, world: World, slas: list[tuple[SLA, dict]]):
        super().__init__("cmm")
        self.world = world
        self.central = CentralMonitor()
        self.slas = slas

    def on_measurements(self, ev: Event) -> None:
        self.central.add(ev.payload["records"])

    def on_sla_check(self, ev: Event) -> None:
        report = self.central.report((0, self.now))
        for sla, binding in self.slas:
            try:
                cr = evaluate_sla(report, sla, binding)
            except UnresolvedScope as exc:
                self.record("SLA_REPORT", sla=sla.sla_id, passed=False, error=str(exc))
                continue
            failed = sorted({f"{i.target}:{i.sla_target}" for i in cr.items if not i.passed})
            self.record("SLA_REPORT", sla=sla.sla_id, passed=cr.passed, checked=len(cr.items), failed=failed)


# -- context and adaptation -------------------------------------------------

class ContextFunction(Entity):
    """Context acquisition function of one access network."""

    def __init__(self, world: World, scope: str):
        super().__init__(f"caf.{scope}")
        self.world = world
        self.scope = scope
        self.store = ContextStore()
        cfg = world.config
        self.rules = congestion_rules(cfg.sustain_windows, cfg.high_watermark, cfg.low_watermark)
        self.window = max(r.sustain_windows for r in self.rules)
        self.history: dict[tuple[str, str], list] = {}
        self.last_threshold: dict[str, str] = {}
        for lid in sorted(world.topology.scope_links(scope)):
            self.store.seed(ContextRecord(lid, "link", "congested", False, "baseline", 0))

    def on_measurements(self, ev: Event) -> None:
        for rec in ev.payload["records"]:
            series = self.history.setdefault((rec.target, rec.metric), [])
            series.append(rec)
            del series[:-self.window]
        self.last_threshold.update(ev.payload.get("thresholds", {}))
        recent = [rec for key in sorted(self.history) for rec in self.history[key]]
        for derived in infer(self.store, self.rules, recent):
            self._absorb(derived, self.last_threshold.get(derived.entity_id))

    def on_context(self, ev: Event) -> None:
        self._absorb(ev.payload["record"], None)

    def _absorb(self, record: ContextRecord, cause: str | None) -> None:
        change = self.store.ingest(record)
        if change is None:
            return
        cid = self.engine.new_id("cc")
        self.record("CONTEXT_CHANGE", id=cid, entity=change.entity_id, entity_kind=change.entity_kind,
                    attribute=change.attribute, old=change.old, new=change.new, source=change.source, cause=cause)
        broker = self.world.broker_id(self.scope)
        if change.entity_kind in ("link", "network_element"):
            metrics = [[t, m, recs[-1].value] for (t, m), recs in sorted(self.history.items()) if t == change.entity_id]
            self.send(broker, "RECONFIG_REQUEST", entity=change.entity_id, attribute=change.attribute,
                      value=change.new, cause=cid, metrics=metrics)
        elif change.entity_kind in ("session", "user"):
            key = "session" if change.entity_kind == "session" else "user"
            context = [[e, a, v] for (e, a), v in sorted(self.store.facts().items(), key=repr) if e == change.entity_id]
            capability = None
            device = self.store.get(change.entity_id, "device")
            if device is not None:
                capability = self.store.get(device, "device_capability")
                if capability is not None:
                    context.append([device, "device_capability", capability])
            self.send(broker, "CAS_NOTIFY", **{key: change.entity_id}, attribute=change.attribute,
                      value=change.new, cause=cid, context=context, capability=capability)

    def on_qos_params(self, ev: Event) -> None:
        p = ev.payload
        if p["media"] is None:
            self.record("ADAPTATION_SKIPPED", session=p["session"], reason="session carries no media")
            return
        try:
            codec = select_codec(self.world.codecs, p["media"], p["available_kbps"])
        except NoFeasibleCodec as exc:
            self.record("ADAPTATION_SKIPPED", session=p["session"], reason=str(exc))
            return
        if codec == p["codec"]:
            self.record("ADAPTATION_SKIPPED", session=p["session"], reason="codec unchanged")
            return
        directive = AdaptationDirective(p["session"], "codec", codec, p["cause"], p["decision"])
        self.send("ads", "ADAPT", directive=asdict(directive), broker=p["broker"])


class AdaptationServer(Entity):
    """Centralised ADS: enforcement point for service parameters."""

    def __init__(self, world: World):
        super().__init__("ads")
        self.world = world

    def on_adapt(self, ev: Event) -> None:
        d = ev.payload["directive"]
        aid = self.engine.new_id("a")
        self.record("ADAPT", id=aid, session=d["session_id"], parameter=d["parameter"], value=d["new_value"],
                    cause=d["cause"], decision=d["decision"])
        self.send(ev.payload["broker"], "ADAPT_APPLY", directive=d)
