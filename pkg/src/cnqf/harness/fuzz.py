"""Randomised scenarios for conservation and oracle checks."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from cnqf.harness.audit import (
    ReplayReport,
    causality_violations,
    ledger_observer,
    ordering_violations,
    replay_ledgers,
    state_violations,
)
from cnqf.harness.entities import WorldConfig
from cnqf.harness.scenario import Injection, ScenarioResult, ScenarioSpec, default_policies, run_scenario
from cnqf.rms import SERVICE_CLASSES
from cnqf.topology import CORE, FIXED, WIRELESS, Topology, topology_from_dict

CAPACITIES = (1000, 2000, 5000, 10000, 20000)
TECHNOLOGIES = tuple(sorted(WIRELESS | FIXED))


def random_topology(rng: random.Random, max_elements: int = 10) -> Topology:
    """Core chain plus up to three access networks, each a small tree hung off a gateway."""
    n_core = rng.randint(1, 3)
    n_an = rng.randint(1, 3)
    budget = max_elements - n_core
    sizes = [1] * n_an
    for _ in range(rng.randint(0, budget - n_an)):
        sizes[rng.randrange(n_an)] += 1

    elements, links, ans = [], [], []
    core = [f"c{i}" for i in range(1, n_core + 1)]
    for cid in core:
        elements.append({"id": cid, "kind": "router", "domain": CORE})

    def link(a: str, b: str, cap: int | None = None) -> None:
        links.append({"id": f"L{len(links) + 1}", "from": a, "to": b,
                      "capacity_kbps": cap or rng.choice(CAPACITIES), "latency_ms": rng.randint(0, 5)})

    for a, b in zip(core, core[1:]):
        link(a, b)
    if n_core == 3 and rng.random() < 0.5:
        link(core[0], core[2])
    for i, size in enumerate(sizes, start=1):
        an = f"an{i}"
        ans.append({"id": an, "technology": rng.choice(TECHNOLOGIES)})
        members = [f"{an}gw"]
        elements.append({"id": members[0], "kind": "gateway", "domain": an})
        link(members[0], rng.choice(core))
        for j in range(1, size):
            eid = f"{an}e{j}"
            elements.append({"id": eid, "kind": rng.choice(("router", "access_point")), "domain": an})
            link(eid, rng.choice(members))
            members.append(eid)
        if size >= 3 and rng.random() < 0.5:
            a, b = rng.sample(members, 2)
            link(a, b)
    return topology_from_dict({"elements": elements, "links": links, "access_networks": ans})


@dataclass
class FuzzConfig:
    max_elements: int = 10
    max_sessions: int = 50
    duration_ms: int = 20000
    blocked_user_rate: float = 0.05
    external_dst_rate: float = 0.05
    unsignaled_rate: float = 0.1
    adapt_rate: float = 0.4
    congestion_rate: float = 0.2


def fuzz_spec(seed: int, cfg: FuzzConfig | None = None) -> ScenarioSpec:
    cfg = cfg or FuzzConfig()
    rng = random.Random(seed)
    topo = random_topology(rng, cfg.max_elements)
    access = sorted(e.id for e in topo.elements.values() if e.domain != CORE)
    everything = sorted(topo.elements)
    devices = {f"dev{i}": rng.choice((300, 800, 2000, 6000)) for i in range(1, 4)}
    injections = [
        Injection(0, "CONTEXT", {"entity": f"device:{d}", "attr": "device_capability", "value": cap})
        for d, cap in sorted(devices.items())
    ]
    codecs = ("H264_HIGH", "H264_MED", "H264_LOW", "G711", "AMR_NB")
    for n in range(1, rng.randint(1, cfg.max_sessions) + 1):
        sid = f"s{n}"
        src = rng.choice(access)
        dst = "ext.gw" if rng.random() < cfg.external_dst_rate else rng.choice(everything)
        user = "blocked" if rng.random() < cfg.blocked_user_rate else f"u{rng.randint(1, 5)}"
        start = rng.randint(1, cfg.duration_ms)
        req = {"session": sid, "user": user, "src": src, "dst": dst, "service_class": rng.choice(SERVICE_CLASSES)}
        if rng.random() < 0.7:
            req["codec"] = rng.choice(codecs)
        else:
            req["kbps"] = rng.randint(1, 6000)
        if rng.random() < cfg.unsignaled_rate:
            injections.append(Injection(start, "SESSION_DETECTED", req))
            continue
        injections.append(Injection(start, "REQUEST", req))
        end = start + rng.randint(20, 8000)
        if rng.random() < cfg.adapt_rate:
            injections.append(Injection(rng.randint(start + 10, end), "CONTEXT",
                                        {"entity": f"session:{sid}", "attr": "device", "value": rng.choice(sorted(devices))}))
        for t in range(start + 2000, end, 2000):
            injections.append(Injection(t, "ACTIVITY", {"session": sid}))
        injections.append(Injection(end, "TERMINATE", {"session": sid}))
    for _ in range(rng.randint(0, 3)):
        if rng.random() < cfg.congestion_rate:
            lid = rng.choice(sorted(topo.links))
            if topo.link_scope(lid) == CORE:
                continue
            t = rng.randint(1, cfg.duration_ms)
            injections.append(Injection(t, "CONTEXT", {"entity": f"link:{lid}", "attr": "congested", "value": True}))
            injections.append(Injection(t + rng.randint(100, 3000), "CONTEXT",
                                        {"entity": f"link:{lid}", "attr": "congested", "value": False}))
    return ScenarioSpec(
        name=f"fuzz-{seed}",
        topology=topo,
        policies=default_policies(),
        injections=injections,
        seed=seed,
        config=WorldConfig(monitoring=False, inactivity_timeout_ms=3000, inactivity_check_ms=1000),
    )


@dataclass
class FuzzOutcome:
    seed: int
    result: ScenarioResult
    invariant_violations: list[str] = field(default_factory=list)
    replay: ReplayReport = field(default_factory=ReplayReport)
    causality: list[str] = field(default_factory=list)
    states: list[str] = field(default_factory=list)
    ordering: list[str] = field(default_factory=list)

    @property
    def final_zero(self) -> bool:
        return all(ledger.is_empty() for ledger in self.result.ledgers.values())

    @property
    def ok(self) -> bool:
        return (not self.invariant_violations and self.replay.ok and not self.causality
                and not self.states and not self.ordering and self.final_zero)


def run_fuzz(seed: int, cfg: FuzzConfig | None = None) -> FuzzOutcome:
    spec = fuzz_spec(seed, cfg)
    violations: list[str] = []
    result = run_scenario(spec, observers=[ledger_observer(violations)])
    trace = result.trace
    return FuzzOutcome(
        seed=seed,
        result=result,
        invariant_violations=violations,
        replay=replay_ledgers(trace, spec.topology, spec.policies, result.ledgers),
        causality=causality_violations(trace),
        states=state_violations(trace),
        ordering=ordering_violations(trace),
    )
