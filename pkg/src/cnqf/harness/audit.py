"""Post-hoc checks over traces.

The replay oracle rebuilds every broker ledger from the trace alone using
plain dictionaries and brute-force sums, then compares each recorded
admission, resize and reroute verdict with what the rebuilt ledger implies.
It shares no bookkeeping code with ``ReservationLedger``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from cnqf.harness.trace import TraceRecord
from cnqf.policy import FactBase, PolicySet, holds
from cnqf.rms import LEGAL_EDGES, ReservationLedger, SessionState
from cnqf.topology import Topology

ROOT_KINDS = frozenset({
    "QOS_REQUEST", "SESSION_DETECTED", "TERMINATE", "INACTIVITY_DETECTED",
    "CONTEXT_CHANGE", "CONGESTION_RAISED", "CONGESTION_CLEARED",
})


def _by_id(trace: Sequence[TraceRecord]) -> dict[str, TraceRecord]:
    return {r.detail["id"]: r for r in trace if "id" in r.detail}


def cause_chain(trace: Sequence[TraceRecord], record: TraceRecord) -> list[TraceRecord]:
    """Follow ``cause`` links backwards from ``record`` (inclusive)."""
    index = _by_id(trace)
    chain = [record]
    seen = set()
    cur = record
    while cur.detail.get("cause") is not None:
        cause = cur.detail["cause"]
        if cause in seen or cause not in index:
            break
        seen.add(cause)
        cur = index[cause]
        chain.append(cur)
    return chain


def causality_violations(trace: Sequence[TraceRecord]) -> list[str]:
    """CONFIGURE must cite an earlier DECISION, which must cite an earlier root cause."""
    index = _by_id(trace)
    problems = []
    for rec in trace:
        if rec.kind != "CONFIGURE" and rec.kind != "CONFIG_NOOP":
            continue
        decision = index.get(rec.detail.get("cause"))
        if decision is None or decision.kind != "DECISION" or decision.seq >= rec.seq:
            problems.append(f"seq {rec.seq}: {rec.kind} cause {rec.detail.get('cause')} is not an earlier DECISION")
            continue
        root = index.get(decision.detail.get("cause"))
        if root is None or root.kind not in ROOT_KINDS or root.seq >= decision.seq:
            problems.append(f"seq {decision.seq}: DECISION cause {decision.detail.get('cause')} is not a request or event")
    return problems


def configure_causality_rate(trace: Sequence[TraceRecord]) -> tuple[int, int]:
    """(resolved, total) CONFIGURE records."""
    total = sum(1 for r in trace if r.kind in ("CONFIGURE", "CONFIG_NOOP"))
    return total - len(causality_violations(trace)), total


def state_violations(trace: Sequence[TraceRecord]) -> list[str]:
    """Every SESSION_<STATE> record must follow a legal edge from the previous one."""
    states = {s.value: s for s in SessionState}
    last: dict[str, SessionState] = {}
    problems = []
    for rec in trace:
        if not rec.kind.startswith("SESSION_") or rec.kind[8:] not in states:
            continue
        sid = rec.detail["session"]
        new = states[rec.kind[8:]]
        prev = last.get(sid, SessionState.REQUESTED)
        if rec.detail.get("prev") != prev.value:
            problems.append(f"seq {rec.seq}: {sid} claims prev {rec.detail.get('prev')}, was {prev.value}")
        if (prev, new) not in LEGAL_EDGES:
            problems.append(f"seq {rec.seq}: {sid} illegal edge {prev.value} -> {new.value}")
        last[sid] = new
    return problems


def ordering_violations(trace: Sequence[TraceRecord]) -> list[str]:
    problems = []
    for a, b in zip(trace, trace[1:]):
        if b.t < a.t:
            problems.append(f"seq {b.seq}: time goes back {a.t} -> {b.t}")
        if b.seq <= a.seq:
            problems.append(f"seq {b.seq}: sequence not increasing")
    return problems


# -- ledger replay oracle ---------------------------------------------------

def brute_force_winner(policies: PolicySet, facts: FactBase) -> str | None:
    """Filter matching policies, sort by priority desc then id asc, take the first."""
    matching = [p for p in policies.policies if holds(p.condition, facts)]
    ranked = sorted(matching, key=lambda p: (-p.priority, p.id))
    return ranked[0].id if ranked else None


def _policy_rejects(policies: PolicySet, facts: FactBase) -> bool:
    winner = brute_force_winner(policies, facts)
    if winner is None:
        return policies.default_decision == "reject"
    chosen = next(p for p in policies.policies if p.id == winner)
    return any(a.kind == "reject" for a in chosen.actions)


@dataclass
class ReplayReport:
    checked: int = 0
    agreed: int = 0
    disagreements: list[str] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    final_match: bool = True
    final_zero: bool = True
    reserved: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.disagreements and not self.violations and self.final_match


def replay_ledgers(
    trace: Sequence[TraceRecord],
    topology: Topology,
    policies: PolicySet | None = None,
    ledgers: Mapping[str, ReservationLedger] | None = None,
) -> ReplayReport:
    """Rebuild ledgers from RESERVE/RELEASE/RESIZE/REROUTE/CNRB_UPDATE and check verdicts.

    With ``policies`` given, policy rejections are re-derived from the request
    facts (admission policies only see request fields). With ``ledgers`` the
    rebuilt state is compared with the live ledgers at the end.
    """
    caps = {lid: link.capacity_kbps for lid, link in topology.links.items()}
    scope_of = {lid: topology.link_scope(lid) for lid in topology.links}
    # scope -> session -> (links, kbps)
    allocs: dict[str, dict[str, tuple[tuple[str, ...], int]]] = {s: {} for s in topology.scopes()}
    requests: dict[str, dict[str, Any]] = {}
    report = ReplayReport()

    def used(link: str, skip: str | None = None) -> int:
        total = 0
        for sid, (links, kbps) in allocs[scope_of[link]].items():
            if sid != skip and link in links:
                total += kbps
        return total

    def fits(links: Iterable[str], kbps: int, skip: str | None = None) -> bool:
        return all(used(l, skip) + kbps <= caps[l] for l in links)

    def check_caps(rec: TraceRecord) -> None:
        for lid in caps:
            if used(lid) > caps[lid]:
                report.violations.append(f"seq {rec.seq}: {lid} carries {used(lid)} > {caps[lid]}")

    def judge(rec: TraceRecord, expected: bool) -> None:
        report.checked += 1
        actual = rec.detail["verdict"] == "admit"
        if actual == expected:
            report.agreed += 1
        else:
            report.disagreements.append(
                f"seq {rec.seq}: {rec.detail['purpose']} verdict {rec.detail['verdict']} for "
                f"{rec.detail['session']} in {rec.detail['scope']}, oracle says {'admit' if expected else 'reject'}"
            )

    for rec in trace:
        d = rec.detail
        kind = rec.kind
        if kind == "QOS_REQUEST":
            requests[d["session"]] = {
                "trigger": "admission", "session_id": d["session"], "user_id": d["user"], "src": d["src"],
                "dst": d["dst"], "service_class": d["service_class"], "bandwidth_kbps": d["kbps"],
            }
        elif kind == "SEGMENT_VERDICT":
            scope, sid, kbps = d["scope"], d["session"], d["kbps"]
            links = tuple(d["links"])
            purpose = d["purpose"]
            if purpose == "admission":
                if d["reason"] == "inter-domain brokerage not supported":
                    judge(rec, False)
                    continue
                rejects = False
                if policies is not None and sid in requests:
                    rejects = _policy_rejects(policies, FactBase(request=requests[sid]))
                elif d["reason"].startswith(("policy ", "default reject")):
                    rejects = True
                judge(rec, not rejects and fits(links, kbps))
            elif purpose == "resize":
                judge(rec, fits(links, kbps, skip=sid))
            elif purpose == "reroute":
                judge(rec, fits(links, kbps, skip=sid))
        elif kind == "RESERVE":
            scope, sid = d["scope"], d["session"]
            if sid in allocs[scope]:
                report.violations.append(f"seq {rec.seq}: {sid} reserved twice in {scope}")
            allocs[scope][sid] = (tuple(d["links"]), d["kbps"])
            check_caps(rec)
        elif kind == "RELEASE" or kind == "CNRB_UPDATE":
            allocs[d["scope"]].pop(d["session"], None)
        elif kind == "RESIZE":
            scope, sid = d["scope"], d["session"]
            if sid not in allocs[scope]:
                report.violations.append(f"seq {rec.seq}: resize of unknown {sid} in {scope}")
                continue
            links, _ = allocs[scope][sid]
            allocs[scope][sid] = (links, d["kbps"])
            check_caps(rec)
        elif kind == "REROUTE":
            scope, sid = d["scope"], d["session"]
            allocs[scope][sid] = (tuple(d["links"]), d["kbps"])
            check_caps(rec)

    report.reserved = {
        scope: {lid: used(lid) for lid in sorted(topology.scope_links(scope))} for scope in topology.scopes()
    }
    report.final_zero = all(v == 0 for per in report.reserved.values() for v in per.values())
    if ledgers is not None:
        for scope, ledger in ledgers.items():
            expected = {sid: {"links": list(l), "kbps": k} for sid, (l, k) in sorted(allocs[scope].items())}
            live = ledger.to_dict()
            if live["reserved"] != report.reserved[scope] or live["allocations"] != expected:
                report.final_match = False
    return report


def ledger_observer(violations: list[str]) -> Callable:
    """Engine observer checking every broker ledger after each step."""

    def observe(engine, event) -> None:
        for entity in engine.entities.values():
            ledger = getattr(entity, "ledger", None)
            if ledger is None:
                continue
            try:
                ledger.check_invariants()
            except AssertionError as exc:
                violations.append(f"t={engine.now} after {event.kind}: {exc}")

    return observe
