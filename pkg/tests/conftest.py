import json

import pytest
from hypothesis import HealthCheck, settings

from cnqf.policy import parse_policy_set
from cnqf.topology import topology_from_dict

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_topology(links, elements=None, access=None):
    """Topology from compact specs.

    ``links``: (id, a, b, capacity); ``elements``: id -> domain, defaulting to
    "core" for ids starting with "c" and "an1" otherwise.
    """
    ids = sorted({x for _, a, b, _ in links for x in (a, b)} | set(elements or {}))
    domains = {eid: (elements or {}).get(eid, "core" if eid.startswith("c") else "an1") for eid in ids}
    access = access or {d: "wimax" for d in set(domains.values()) if d != "core"}
    return topology_from_dict({
        "elements": [{"id": e, "kind": "router", "domain": d} for e, d in domains.items()],
        "links": [{"id": lid, "from": a, "to": b, "capacity_kbps": cap} for lid, a, b, cap in links],
        "access_networks": [{"id": an, "technology": t} for an, t in sorted(access.items())],
    })


@pytest.fixture
def admit_all():
    return parse_policy_set("default reject\npolicy all priority 1 when request(trigger) == \"admission\" then admit\n")


@pytest.fixture
def write_json(tmp_path):
    def write(name, data):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path
    return write


# (criterion number, title, passed, detail) lines collected by test_acceptance
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
