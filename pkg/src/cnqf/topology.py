"""Converged network model: access networks of mixed technologies around a core."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from cnqf.errors import NoPath, ParseError, UnknownElement, UnknownLink, ValidationError

CORE = "core"

ELEMENT_KINDS = frozenset({"router", "gateway", "access_point"})
WIRELESS = frozenset({"wimax", "wifi", "cellular", "satellite"})
FIXED = frozenset({"xdsl", "cable"})
TECHNOLOGIES = WIRELESS | FIXED


def broker_role_for(technology: str) -> str:
    if technology in WIRELESS:
        return "WARB"
    if technology in FIXED:
        return "FARB"
    raise ValidationError(f"unknown technology {technology}")


@dataclass(frozen=True)
class NetworkElement:
    id: str
    kind: str
    domain: str


@dataclass(frozen=True)
class Link:
    id: str
    endpoints: tuple[str, str]
    capacity_kbps: int
    latency_ms: int = 0

    def other(self, element_id: str) -> str:
        a, b = self.endpoints
        return b if element_id == a else a


@dataclass(frozen=True)
class AccessNetwork:
    id: str
    technology: str

    @property
    def broker_role(self) -> str:
        return broker_role_for(self.technology)


@dataclass(frozen=True)
class Topology:
    elements: Mapping[str, NetworkElement]
    links: Mapping[str, Link]
    access_networks: Mapping[str, AccessNetwork]
    _adjacency: Mapping[str, tuple[Link, ...]] = field(repr=False, compare=False, default_factory=dict)

    def element(self, element_id: str) -> NetworkElement:
        try:
            return self.elements[element_id]
        except KeyError:
            raise UnknownElement(f"unknown element {element_id}") from None

    def link(self, link_id: str) -> Link:
        try:
            return self.links[link_id]
        except KeyError:
            raise UnknownLink(f"unknown link {link_id}") from None

    def incident(self, element_id: str) -> tuple[Link, ...]:
        return self._adjacency.get(element_id, ())

    def link_scope(self, link: Link | str) -> str:
        """Domain owning a link: the access network of a non-core endpoint, else core."""
        if isinstance(link, str):
            link = self.link(link)
        for end in link.endpoints:
            domain = self.elements[end].domain
            if domain != CORE:
                return domain
        return CORE

    def scope_links(self, scope: str) -> dict[str, int]:
        """Capacities of every link in ``scope`` keyed by link id."""
        return {l.id: l.capacity_kbps for l in self.links.values() if self.link_scope(l) == scope}

    def scopes(self) -> list[str]:
        return sorted(self.access_networks) + [CORE]

    def core_elements(self) -> list[str]:
        return sorted(e.id for e in self.elements.values() if e.domain == CORE)

    def elements_in(self, domain: str) -> list[str]:
        return sorted(e.id for e in self.elements.values() if e.domain == domain)


_TOP_KEYS = {"elements", "links", "access_networks"}
_ELEMENT_KEYS = {"id", "kind", "domain"}
_LINK_KEYS = {"id", "from", "to", "capacity_kbps", "latency_ms"}
_AN_KEYS = {"id", "technology"}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_keys(entry: Any, allowed: set[str], required: set[str], what: str) -> None:
    if not isinstance(entry, dict):
        raise ValidationError(f"{what} entry must be an object")
    unknown = sorted(set(entry) - allowed)
    if unknown:
        raise ValidationError(f"unknown key {unknown[0]} in {what}")
    missing = sorted(required - set(entry))
    if missing:
        raise ValidationError(f"missing key {missing[0]} in {what}")
    for key in required & {"id"}:
        if not isinstance(entry[key], str) or not entry[key]:
            raise ValidationError(f"{what} id must be a non-empty string")


def topology_from_dict(data: Mapping[str, Any]) -> Topology:
    """Validate a decoded topology document and build the model."""
    if not isinstance(data, dict):
        raise ValidationError("topology document must be an object")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ValidationError(f"unknown key {unknown[0]} in topology")

    access_networks: dict[str, AccessNetwork] = {}
    for entry in data.get("access_networks", []):
        _check_keys(entry, _AN_KEYS, _AN_KEYS, "access network")
        if entry["id"] in access_networks:
            raise ValidationError(f"duplicate access network id {entry['id']}")
        if entry["id"] == CORE:
            raise ValidationError("access network id 'core' is reserved")
        if entry["technology"] not in TECHNOLOGIES:
            raise ValidationError(f"unknown technology {entry['technology']} for {entry['id']}")
        access_networks[entry["id"]] = AccessNetwork(entry["id"], entry["technology"])
    if not access_networks:
        raise ValidationError("topology needs at least one access network")

    elements: dict[str, NetworkElement] = {}
    for entry in data.get("elements", []):
        _check_keys(entry, _ELEMENT_KEYS, _ELEMENT_KEYS, "element")
        eid = entry["id"]
        if eid in elements:
            raise ValidationError(f"duplicate element id {eid}")
        if entry["kind"] not in ELEMENT_KINDS:
            raise ValidationError(f"unknown element kind {entry['kind']} for {eid}")
        if entry["domain"] != CORE and entry["domain"] not in access_networks:
            raise ValidationError(f"element {eid} in undeclared domain {entry['domain']}")
        elements[eid] = NetworkElement(eid, entry["kind"], entry["domain"])
    if not any(e.domain == CORE for e in elements.values()):
        raise ValidationError("core domain has no elements")
    for an in access_networks:
        if not any(e.domain == an for e in elements.values()):
            raise ValidationError(f"access network {an} has no elements")

    links: dict[str, Link] = {}
    for entry in data.get("links", []):
        _check_keys(entry, _LINK_KEYS, _LINK_KEYS - {"latency_ms"}, "link")
        lid = entry["id"]
        if lid in links:
            raise ValidationError(f"duplicate link id {lid}")
        for end in (entry["from"], entry["to"]):
            if end not in elements:
                raise ValidationError(f"dangling endpoint {end} on link {lid}")
        if entry["from"] == entry["to"]:
            raise ValidationError(f"self-loop on link {lid}")
        cap = entry["capacity_kbps"]
        if not _is_int(cap) or cap <= 0:
            raise ValidationError(f"capacity of link {lid} must be a positive integer, got {cap!r}")
        latency = entry.get("latency_ms", 0)
        if not _is_int(latency) or latency < 0:
            raise ValidationError(f"latency of link {lid} must be a non-negative integer")
        domains = {elements[entry["from"]].domain, elements[entry["to"]].domain} - {CORE}
        if len(domains) > 1:
            a, b = sorted(domains)
            raise ValidationError(f"link {lid} joins access networks {a} and {b} directly")
        links[lid] = Link(lid, (entry["from"], entry["to"]), cap, latency)

    adjacency: dict[str, list[Link]] = {eid: [] for eid in elements}
    for link in links.values():
        for end in link.endpoints:
            adjacency[end].append(link)
    frozen_adj = {k: tuple(sorted(v, key=lambda l: l.id)) for k, v in adjacency.items()}
    return Topology(elements, links, access_networks, frozen_adj)


def load_topology(document: str) -> Topology:
    """Parse a JSON topology document."""
    try:
        data = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed topology document: {exc.msg}", exc.lineno, exc.colno) from None
    return topology_from_dict(data)


def load_topology_file(path: str | Path) -> Topology:
    return load_topology(Path(path).read_text(encoding="utf-8"))


def find_path(
    topology: Topology, src: str, dst: str, avoid: Iterable[str] = ()
) -> list[Link]:
    """Minimum-hop path from ``src`` to ``dst``.

    Equal-hop candidates are ranked by their sequence of next-element ids
    (lexicographic), then by link id for parallel links. ``avoid`` names
    links that must not be used.
    """
    topology.element(src)
    topology.element(dst)
    banned = set(avoid)
    if src == dst:
        return []

    # hop distance of every element to dst
    dist = {dst: 0}
    queue = deque([dst])
    while queue:
        node = queue.popleft()
        for link in topology.incident(node):
            if link.id in banned:
                continue
            nxt = link.other(node)
            if nxt not in dist:
                dist[nxt] = dist[node] + 1
                queue.append(nxt)
    if src not in dist:
        raise NoPath(f"no path from {src} to {dst}")

    path: list[Link] = []
    node = src
    while node != dst:
        want = dist[node] - 1
        best = min(
            (link.other(node), link.id, link)
            for link in topology.incident(node)
            if link.id not in banned and dist.get(link.other(node)) == want
        )
        path.append(best[2])
        node = best[0]
    return path


def path_elements(path: list[Link], src: str) -> list[str]:
    """Element sequence visited by ``path`` starting from ``src``."""
    nodes = [src]
    for link in path:
        if nodes[-1] not in link.endpoints:
            raise ValidationError(f"link {link.id} does not continue the path at {nodes[-1]}")
        nodes.append(link.other(nodes[-1]))
    return nodes


def residual_capacity(link: Link, ledger) -> int:
    """Spare kbps on ``link`` given the reservations held in ``ledger``."""
    return link.capacity_kbps - ledger.reserved_kbps(link.id)
