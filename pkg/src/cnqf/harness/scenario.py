"""Scenario specs, the two scripted procedures, and the scenario runner."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from cnqf.cas import CodecTable, ContextRecord, parse_context_line, parse_literal
from cnqf.errors import AssertionFailure, CnqfError, ParseError, UnknownLink, ValidationError
from cnqf.harness.engine import Engine, Event
from cnqf.harness.entities import World, WorldConfig
from cnqf.harness.trace import Milestone, TraceRecord, assert_milestones, format_trace
from cnqf.mms import SLA
from cnqf.policy import PolicySet, load_policy_file, parse_policy_set
from cnqf.rms import QoSMappingTable, ReservationLedger, Session
from cnqf.topology import CORE, Topology, load_topology, load_topology_file, topology_from_dict

INJECTION_KINDS = ("REQUEST", "TERMINATE", "ACTIVITY", "LOAD", "RANDOM_LOAD", "CONTEXT", "SESSION_DETECTED")

FIG3_MILESTONES = (
    "QOS_REQUEST", "ADMISSION_QUERY", "ADMIT", "SESSION_ACTIVE", "CONGESTION_RAISED", "CONTEXT_CHANGE",
    "DECISION", "CONFIGURE(set_route)", "TERMINATE", "RELEASE", "CNRB_UPDATE",
)
FIG4_MILESTONES = (
    "SESSION_ACTIVE", "CONTEXT_CHANGE(device)", "CAS_NOTIFY", "QOS_PARAMS", "ADAPT", "CONFIGURE",
    "SESSION_ACTIVE", "INACTIVITY_DETECTED", "RELEASE", "CNRB_UPDATE",
)


@dataclass(frozen=True)
class Injection:
    t: int
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in INJECTION_KINDS:
            raise ValidationError(f"unknown injection kind {self.kind}")
        if isinstance(self.t, bool) or not isinstance(self.t, int) or self.t < 0:
            raise ValidationError(f"injection time must be a non-negative integer, got {self.t!r}")


@dataclass
class ScenarioSpec:
    name: str
    topology: Topology
    policies: PolicySet
    qos_table: QoSMappingTable = field(default_factory=QoSMappingTable.default)
    codecs: CodecTable = field(default_factory=CodecTable.default)
    injections: list[Injection] = field(default_factory=list)
    milestones: list[str] = field(default_factory=list)
    seed: int = 0
    config: WorldConfig = field(default_factory=WorldConfig)
    slas: list[SLA] = field(default_factory=list)

    def validate(self) -> None:
        """Every id referenced by an injection or assertion must resolve."""
        topo = self.topology
        users: dict[str, str] = {}
        for inj in self.injections:
            p = inj.params
            if inj.kind in ("REQUEST", "SESSION_DETECTED"):
                for key in ("session", "src", "dst", "service_class"):
                    if key not in p:
                        raise ValidationError(f"{inj.kind} at t={inj.t} lacks {key}")
                if p["src"] not in topo.elements:
                    raise ValidationError(f"{inj.kind} at t={inj.t}: unknown source {p['src']}")
                if "kbps" not in p and "codec" not in p:
                    raise ValidationError(f"{inj.kind} at t={inj.t} needs kbps or codec")
                if "codec" in p:
                    self.codecs.bitrate(p["codec"])
                users[p["session"]] = p.get("user", p["session"])
            elif inj.kind in ("TERMINATE", "ACTIVITY"):
                if p.get("session") not in users:
                    raise ValidationError(f"{inj.kind} at t={inj.t} names unknown session {p.get('session')}")
            elif inj.kind in ("LOAD", "RANDOM_LOAD"):
                if p.get("link") not in topo.links:
                    raise UnknownLink(f"{inj.kind} at t={inj.t} names unknown link {p.get('link')}")
            elif inj.kind == "CONTEXT":
                context_record(inj)
                scope = p.get("scope")
                if scope is not None and scope not in topo.access_networks:
                    raise ValidationError(f"CONTEXT at t={inj.t}: no access network {scope}")
        for token in self.milestones:
            Milestone.parse(token)
        for sla in self.slas:
            if sla.scope not in topo.scopes():
                raise ValidationError(f"SLA {sla.sla_id} names unknown scope {sla.scope}")
        if self.config.monitoring and self.config.horizon_ms is None:
            raise ValidationError("periodic monitoring needs a horizon")


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    world: World
    trace: list[TraceRecord]

    @property
    def engine(self) -> Engine:
        return self.world.engine

    @property
    def ledgers(self) -> dict[str, ReservationLedger]:
        return self.world.ledgers()

    @property
    def sessions(self) -> dict[str, Session]:
        return self.world.sessions()

    def text(self) -> str:
        return format_trace(self.trace, self.spec.seed)


# -- injections -------------------------------------------------------------

def request_payload(p: Mapping[str, Any], codecs: CodecTable) -> dict[str, Any]:
    kbps = p["kbps"] if "kbps" in p else codecs.bitrate(p["codec"])
    media = p.get("media")
    if media is None and "codec" in p:
        media = codecs.entries[p["codec"]].media_kind
    req = {
        "session_id": p["session"],
        "user_id": p.get("user", p["session"]),
        "src": p["src"],
        "dst": p["dst"],
        "service_class": p["service_class"],
        "bandwidth_kbps": kbps,
        "media_kind": media,
        "codec": p.get("codec"),
    }
    for key in ("max_delay_ms", "max_loss_rate"):
        if key in p:
            req[key] = p[key]
    return req


def context_record(inj: Injection) -> ContextRecord:
    p = inj.params
    if "line" in p:
        return parse_context_line(p["line"])
    kind, sep, entity = str(p.get("entity", "")).partition(":")
    if not sep:
        raise ValidationError("CONTEXT entity must be <kind>:<id>")
    value = p["value"]
    return ContextRecord(entity, kind, p["attr"], value, p.get("source", "injected"), inj.t)


def inject_background_load(engine: Engine, link_id: str, kbps: int, at: int) -> Event:
    """Schedule a LOAD_CHANGE; polls from ``at`` on see ``kbps`` of background traffic."""
    topology: Topology = engine.entities["net"].world.topology
    if link_id not in topology.links:
        raise UnknownLink(f"unknown link {link_id}")
    if isinstance(kbps, bool) or not isinstance(kbps, int) or kbps < 0:
        raise ValidationError("background load must be a non-negative integer")
    return engine.post("net", "LOAD_CHANGE", {"link": link_id, "kbps": kbps}, at=at, sender="scenario")


def _context_scopes(world: World, inj: Injection, record: ContextRecord, session_src: dict[str, str]) -> list[str]:
    if "scope" in inj.params:
        return [inj.params["scope"]]
    topo = world.topology
    if record.entity_kind == "link" and record.entity_id in topo.links:
        scope = topo.link_scope(record.entity_id)
        return [scope] if scope != CORE else []
    if record.entity_kind == "network_element" and record.entity_id in topo.elements:
        scope = topo.element(record.entity_id).domain
        return [scope] if scope != CORE else []
    if record.entity_kind == "session" and record.entity_id in session_src:
        return [world.scope_of(session_src[record.entity_id])]
    # users, devices and places are not tied to one access network
    return sorted(world.cafs)


def _schedule(world: World, spec: ScenarioSpec) -> None:
    engine = world.engine
    users: dict[str, str] = {}
    srcs: dict[str, str] = {}
    for inj in sorted(spec.injections, key=lambda i: i.t):
        p = inj.params
        if inj.kind == "REQUEST":
            req = request_payload(p, spec.codecs)
            users[req["session_id"]] = req["user_id"]
            srcs[req["session_id"]] = req["src"]
            client = world.client(req["user_id"])
            engine.post(client.id, "REQUEST", {"request": req}, at=inj.t, sender="scenario")
        elif inj.kind == "SESSION_DETECTED":
            req = request_payload(p, spec.codecs)
            srcs[req["session_id"]] = req["src"]
            engine.post(f"rc.{world.scope_of(req['src'])}", "SESSION_DETECTED", {"request": req},
                        at=inj.t, sender="scenario")
        elif inj.kind == "TERMINATE":
            engine.post(f"client.{users[p['session']]}", "END", {"session": p["session"]}, at=inj.t, sender="scenario")
        elif inj.kind == "ACTIVITY":
            engine.post(f"client.{users[p['session']]}", "ACTIVITY", {"session": p["session"]},
                        at=inj.t, sender="scenario")
        elif inj.kind == "LOAD":
            inject_background_load(engine, p["link"], p["kbps"], inj.t)
        elif inj.kind == "RANDOM_LOAD":
            engine.post("net", "RANDOM_LOAD", dict(p), at=inj.t, sender="scenario")
        elif inj.kind == "CONTEXT":
            record = replace(context_record(inj), timestamp=inj.t) if "line" not in p else context_record(inj)
            for scope in _context_scopes(world, inj, record, srcs):
                engine.post(f"caf.{scope}", "CONTEXT", {"record": record}, at=inj.t, sender="scenario")


def run_scenario(
    spec: ScenarioSpec,
    observers: Iterable[Callable[[Engine, Event], None]] = (),
    check_milestones: bool = True,
) -> ScenarioResult:
    """Run to exhaustion or the horizon; raise AssertionFailure on unmet milestones.

    The failure carries the finished run as ``.result`` so callers can still
    write the trace.
    """
    spec.validate()
    bindings = {scope: sorted(spec.topology.scope_links(scope)) for scope in spec.topology.scopes()}
    world = World(spec.topology, spec.policies, spec.qos_table, spec.codecs, spec.config, spec.seed,
                  [(sla, bindings) for sla in spec.slas])
    engine = world.engine
    engine.observers.extend(observers)
    engine.record("engine", "ENGINE_START", scenario=spec.name, seed=spec.seed)
    world.start()
    _schedule(world, spec)
    steps = 0
    horizon = spec.config.horizon_ms
    while engine.pending() and (horizon is None or engine.peek_time() <= horizon):
        engine.step()
        steps += 1
    engine.record("engine", "ENGINE_STOP", events=steps, pending=engine.pending())
    result = ScenarioResult(spec, world, engine.trace)
    if check_milestones and spec.milestones:
        try:
            assert_milestones(result.trace, spec.milestones)
        except AssertionFailure as exc:
            exc.result = result
            raise
    return result


# -- named scenarios --------------------------------------------------------

def _data_text(name: str) -> str:
    return resources.files("cnqf.data").joinpath(name).read_text(encoding="utf-8")


def default_topology() -> Topology:
    return load_topology(_data_text("converged.json"))


def default_policies() -> PolicySet:
    return parse_policy_set(_data_text("cnqf.pol"))


def scenario_fig3() -> ScenarioSpec:
    """Context-driven QoS adaptation: congestion on the access link triggers a reroute."""
    video = {"session": "s1", "user": "u1", "src": "ap1", "dst": "c2", "service_class": "streaming", "codec": "H264_HIGH"}
    return ScenarioSpec(
        name="fig3",
        topology=default_topology(),
        policies=default_policies(),
        injections=[
            Injection(1000, "REQUEST", video),
            Injection(3000, "LOAD", {"link": "L1", "kbps": 4500}),
            Injection(9000, "LOAD", {"link": "L1", "kbps": 0}),
            Injection(12000, "TERMINATE", {"session": "s1"}),
        ],
        milestones=list(FIG3_MILESTONES),
        seed=42,
        config=WorldConfig(monitoring=True, horizon_ms=15000, sla_check_ms=14500),
        slas=[SLA("an1-video", "an1", {"max_delay_ms": 50, "max_loss_rate": 0.01})],
    )


def scenario_fig4() -> ScenarioSpec:
    """Context-driven service adaptation: the session moves to a weaker device."""
    video = {"session": "s1", "user": "u1", "src": "ap1", "dst": "c2", "service_class": "streaming", "codec": "H264_HIGH"}
    injections = [
        Injection(500, "CONTEXT", {"entity": "device:phone1", "attr": "device_capability", "value": 800}),
        Injection(1000, "REQUEST", video),
    ]
    injections += [Injection(t, "ACTIVITY", {"session": "s1"}) for t in range(2000, 7001, 1000)]
    injections.append(Injection(5000, "CONTEXT", {"entity": "session:s1", "attr": "device", "value": "phone1"}))
    return ScenarioSpec(
        name="fig4",
        topology=default_topology(),
        policies=default_policies(),
        injections=injections,
        milestones=list(FIG4_MILESTONES),
        seed=42,
        config=WorldConfig(monitoring=True, horizon_ms=15000, inactivity_timeout_ms=5000),
    )


NAMED_SCENARIOS = {"fig3": scenario_fig3, "fig4": scenario_fig4}


# -- scenario files ---------------------------------------------------------

_SPEC_KEYS = {"name", "topology", "policies", "qos_mapping", "l2_classes", "codecs", "seed", "injections",
              "milestones", "config", "slas"}


def scenario_from_dict(data: Mapping[str, Any], base: Path = Path(".")) -> ScenarioSpec:
    """Build a spec from a scenario document; relative paths resolve against ``base``."""
    unknown = set(data) - _SPEC_KEYS
    if unknown:
        raise ValidationError(f"unknown scenario keys {sorted(unknown)}")

    def path(key: str) -> Path:
        return base / data[key]

    topo = data.get("topology")
    if topo is None:
        topology = default_topology()
    elif isinstance(topo, dict):
        topology = topology_from_dict(topo)
    else:
        topology = load_topology_file(path("topology"))
    policies = load_policy_file(path("policies")) if "policies" in data else default_policies()
    if "qos_mapping" in data:
        qos = QoSMappingTable.load(path("qos_mapping"), path("l2_classes") if "l2_classes" in data else None)
    else:
        qos = QoSMappingTable.default()
    codecs = CodecTable.load(path("codecs")) if "codecs" in data else CodecTable.default()

    config_data = dict(data.get("config", {}))
    known = {f.name for f in fields(WorldConfig)}
    if set(config_data) - known:
        raise ValidationError(f"unknown config keys {sorted(set(config_data) - known)}")
    injections = []
    for entry in data.get("injections", []):
        entry = dict(entry)
        try:
            t, kind = entry.pop("t"), entry.pop("kind")
        except KeyError as exc:
            raise ValidationError(f"injection lacks {exc.args[0]}") from None
        injections.append(Injection(t, kind, entry))
    slas = [SLA(s["id"], s["scope"], s["targets"]) for s in data.get("slas", [])]
    spec = ScenarioSpec(
        name=data.get("name", "scenario"),
        topology=topology,
        policies=policies,
        qos_table=qos,
        codecs=codecs,
        injections=injections,
        milestones=list(data.get("milestones", [])),
        seed=int(data.get("seed", 0)),
        config=WorldConfig(**config_data),
        slas=slas,
    )
    spec.validate()
    return spec


def load_scenario_file(path: str | Path) -> ScenarioSpec:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(data, dict):
        raise ValidationError("scenario document must be an object")
    return scenario_from_dict(data, path.parent)
