import json

import pytest

from cnqf.cli import main
from cnqf.errors import AssertionFailure, UnknownLink, ValidationError
from cnqf.harness.audit import causality_violations, replay_ledgers, state_violations
from cnqf.harness.entities import World, WorldConfig
from cnqf.harness.scenario import (
    Injection,
    ScenarioSpec,
    default_policies,
    inject_background_load,
    load_scenario_file,
    run_scenario,
    scenario_fig3,
    scenario_fig4,
)
from cnqf.harness.trace import count_embeddings
from cnqf.rms import SessionState, serialize_ledgers
from cnqf.topology import topology_from_dict


def small_topology(access_cap=5000, core_cap=100000):
    return topology_from_dict({
        "elements": [
            {"id": "ap1", "kind": "access_point", "domain": "an1"},
            {"id": "gw1", "kind": "gateway", "domain": "an1"},
            {"id": "c1", "kind": "router", "domain": "core"},
            {"id": "c2", "kind": "router", "domain": "core"},
        ],
        "links": [
            {"id": "L1", "from": "ap1", "to": "gw1", "capacity_kbps": access_cap},
            {"id": "L2", "from": "gw1", "to": "c1", "capacity_kbps": 100000},
            {"id": "L3", "from": "c1", "to": "c2", "capacity_kbps": core_cap},
        ],
        "access_networks": [{"id": "an1", "technology": "wimax"}],
    })


def request(sid, dst="c2", user="u1", **extra):
    params = {"session": sid, "user": user, "src": "ap1", "dst": dst, "service_class": "streaming"}
    params.update(extra or {"codec": "H264_MED"})
    return params


def spec_with(injections, topology=None, **config):
    config.setdefault("inactivity_timeout_ms", None)
    return ScenarioSpec("t", topology or small_topology(), default_policies(), injections=injections,
                        config=WorldConfig(**config))


def kinds(result):
    return [r.kind for r in result.trace]


# -- the two reference scenarios --------------------------------------------

def test_fig3_reroutes_without_touching_media():
    result = run_scenario(scenario_fig3())
    assert count_embeddings(result.trace, scenario_fig3().milestones) == 1
    reroutes = [r for r in result.trace if r.kind == "REROUTE"]
    assert [r.detail["links"] for r in reroutes] == [["L2", "L3", "L4"]]
    assert not any(r.kind in ("ADAPT", "RESIZE") for r in result.trace)
    admitted = next(r for r in result.trace if r.kind == "SESSION_ADMITTED")
    assert (admitted.detail["codec"], admitted.detail["kbps"]) == ("H264_HIGH", 4000)
    assert result.sessions["s1"].state is SessionState.TERMINATED
    assert all(ledger.is_empty() for ledger in result.ledgers.values())


def test_fig3_trace_audits_clean():
    spec = scenario_fig3()
    result = run_scenario(spec)
    assert causality_violations(result.trace) == []
    assert state_violations(result.trace) == []
    assert replay_ledgers(result.trace, spec.topology, spec.policies, result.ledgers).ok


def test_fig4_adapts_to_the_device_codec():
    spec = scenario_fig4()
    result = run_scenario(spec)
    adapted = [r for r in result.trace if r.kind == "ADAPTED"]
    assert len(adapted) == 1
    assert adapted[0].detail["codec"] == "H264_LOW"
    assert adapted[0].detail["kbps"] == spec.codecs.bitrate("H264_LOW")
    resize = [r for r in result.trace if r.kind == "RESIZE"]
    assert resize and all(r.detail["kbps"] == 500 for r in resize)
    assert any(r.kind == "INACTIVITY_DETECTED" for r in result.trace)
    assert result.sessions["s1"].state is SessionState.TERMINATED
    assert causality_violations(result.trace) == []
    assert replay_ledgers(result.trace, spec.topology, spec.policies, result.ledgers).ok


@pytest.mark.parametrize("make", [scenario_fig3, scenario_fig4])
def test_reference_runs_are_deterministic(make):
    assert run_scenario(make()).text() == run_scenario(make()).text()


# -- small harness scenarios ------------------------------------------------

def test_empty_scenario():
    result = run_scenario(spec_with([]))
    assert kinds(result) == ["ENGINE_START", "ENGINE_STOP"]


def test_single_request_becomes_active():
    result = run_scenario(spec_with([Injection(10, "REQUEST", request("s1"))]))
    assert "ADMIT" in kinds(result)
    assert result.sessions["s1"].state is SessionState.ACTIVE
    assert result.ledgers["an1"].reserved_kbps("L1") == 1500
    assert result.ledgers["core"].reserved_kbps("L3") == 1500


def test_core_reject_rolls_back_access_reservation():
    baseline = run_scenario(spec_with([], topology=small_topology(core_cap=1000)))
    result = run_scenario(spec_with([Injection(10, "REQUEST", request("s1"))], topology=small_topology(core_cap=1000)))
    ks = kinds(result)
    assert "ROLLBACK" in ks or "RELEASE" in ks
    assert result.sessions["s1"].state is SessionState.REJECTED
    assert serialize_ledgers(result.ledgers) == serialize_ledgers(baseline.ledgers)


def test_blocked_user_is_rejected_by_policy():
    result = run_scenario(spec_with([Injection(10, "REQUEST", request("s1", user="blocked"))]))
    verdict = next(r for r in result.trace if r.kind == "SEGMENT_VERDICT")
    assert verdict.detail["verdict"] == "reject" and verdict.detail["reason"] == "policy block_listed"
    assert result.ledgers["an1"].is_empty()


def upward_spec(adapt):
    injections = [
        Injection(0, "CONTEXT", {"entity": "device:dev1", "attr": "device_capability", "value": 6000}),
        Injection(100, "REQUEST", request("s1", dst="gw1")),
        Injection(1001, "REQUEST", request("s2", dst="gw1", user="u2", kbps=2000)),
    ]
    if adapt:
        injections.append(Injection(1000, "CONTEXT", {"entity": "session:s1", "attr": "device", "value": "dev1"}))
    return spec_with(injections)


def test_upward_adaptation_failure_restores_session_and_ledger():
    failed = run_scenario(upward_spec(True))
    untouched = run_scenario(upward_spec(False))
    assert "ADAPTATION_FAILED" in kinds(failed)
    assert failed.sessions["s1"] == untouched.sessions["s1"]
    assert serialize_ledgers(failed.ledgers) == serialize_ledgers(untouched.ledgers)
    assert state_violations(failed.trace) == []


def test_unsignaled_session_is_detected_and_admitted():
    result = run_scenario(spec_with([Injection(10, "SESSION_DETECTED", request("s1"))]))
    req = next(r for r in result.trace if r.kind == "QOS_REQUEST")
    assert req.detail["signaled"] is False and req.detail["cause"] is not None
    assert result.sessions["s1"].state is SessionState.ACTIVE


def test_inactive_session_is_torn_down():
    result = run_scenario(spec_with([Injection(10, "REQUEST", request("s1"))],
                                    inactivity_timeout_ms=2000, inactivity_check_ms=500, horizon_ms=10000))
    assert "INACTIVITY_DETECTED" in kinds(result)
    assert result.sessions["s1"].state is SessionState.TERMINATED
    assert all(ledger.is_empty() for ledger in result.ledgers.values())


# -- background load --------------------------------------------------------

def load_topology():
    return topology_from_dict({
        "elements": [{"id": "a1", "kind": "router", "domain": "an1"}, {"id": "g1", "kind": "gateway", "domain": "an1"},
                     {"id": "c1", "kind": "router", "domain": "core"}],
        "links": [{"id": "L1", "from": "a1", "to": "g1", "capacity_kbps": 100000},
                  {"id": "L2", "from": "g1", "to": "c1", "capacity_kbps": 100000}],
        "access_networks": [{"id": "an1", "technology": "xdsl"}],
    })


def measured(trace, t):
    return [r.detail["value"] for r in trace if r.kind == "MEASURE" and r.t == t and r.detail["target"] == "L1"]


def test_background_load_changes_measured_utilization():
    spec = spec_with([Injection(10, "REQUEST", {"session": "s1", "src": "a1", "dst": "g1",
                                                "service_class": "background", "kbps": 30000})],
                     topology=load_topology(), monitoring=True, horizon_ms=8000)
    result = run_scenario(spec)
    assert measured(result.trace, 4000) == [pytest.approx(0.3)]

    world = World(spec.topology, spec.policies, spec.qos_table, spec.codecs, spec.config, 0, [])
    world.start()
    world.engine.post(world.client("s1").id, "REQUEST", {"request": {
        "session_id": "s1", "user_id": "s1", "src": "a1", "dst": "g1", "service_class": "background",
        "bandwidth_kbps": 30000, "media_kind": None, "codec": None}}, at=10)
    inject_background_load(world.engine, "L1", 50000, 3500)
    inject_background_load(world.engine, "L1", 0, 4500)
    world.engine.run(8000)
    trace = world.engine.trace
    assert measured(trace, 4000) == [pytest.approx(0.8)]
    assert measured(trace, 5000) == [pytest.approx(0.3)]
    with pytest.raises(UnknownLink):
        inject_background_load(world.engine, "L9", 1, 9000)


# -- scenario files and CLI -------------------------------------------------

def test_scenario_file_round_trip(write_json):
    path = write_json("s.json", {
        "name": "file",
        "seed": 3,
        "injections": [{"t": 100, "kind": "REQUEST", "session": "s1", "user": "u1", "src": "ap1", "dst": "c2",
                        "service_class": "streaming", "codec": "H264_LOW"}],
        "milestones": ["QOS_REQUEST", "ADMIT", "SESSION_ACTIVE"],
        "config": {"inactivity_timeout_ms": None},
    })
    spec = load_scenario_file(path)
    assert spec.seed == 3 and spec.name == "file"
    assert run_scenario(spec).sessions["s1"].state is SessionState.ACTIVE


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"config": {"speed": 3}},
    {"injections": [{"t": 1, "kind": "TERMINATE", "session": "nobody"}]},
    {"injections": [{"t": 1, "kind": "TELEPORT"}]},
    {"injections": [{"kind": "REQUEST"}]},
])
def test_bad_scenario_documents(write_json, doc):
    with pytest.raises((ValidationError, UnknownLink)):
        load_scenario_file(write_json("bad.json", doc))


def test_unmet_milestones_raise_with_result():
    spec = spec_with([Injection(10, "REQUEST", request("s1"))])
    spec.milestones = ["QOS_REQUEST", "REROUTE"]
    with pytest.raises(AssertionFailure) as info:
        run_scenario(spec)
    assert info.value.result.trace[-1].kind == "ENGINE_STOP"


def test_cli_run_named_scenario(tmp_path):
    out = tmp_path / "fig3.trace"
    assert main(["run", "--scenario", "fig3", "--trace", str(out)]) == 0
    assert out.read_text().startswith("# cnqf-trace v1 seed=42\n")


def test_cli_seed_override(tmp_path, capsys):
    assert main(["run", "--scenario", "fig4", "--seed", "9"]) == 0
    assert capsys.readouterr().out.startswith("# cnqf-trace v1 seed=9\n")


def test_cli_assertion_failure_still_writes_trace(tmp_path, write_json):
    path = write_json("s.json", {"injections": [], "milestones": ["ADMIT"]})
    out = tmp_path / "t.trace"
    assert main(["run", "--scenario", str(path), "--trace", str(out)]) == 2
    assert "ENGINE_STOP" in out.read_text()


def test_cli_load_errors(tmp_path, capsys):
    assert main(["run", "--scenario", str(tmp_path / "missing.json")]) == 1
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["run", "--scenario", str(broken)]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_validate(tmp_path, capsys):
    from cnqf.harness import scenario

    good = tmp_path / "good.pol"
    good.write_text(scenario._data_text("cnqf.pol"))
    topo = tmp_path / "topo.json"
    topo.write_text(scenario._data_text("converged.json"))
    assert main(["validate", "--policies", str(good), "--topology", str(topo)]) == 0
    assert "5 policies" in capsys.readouterr().out
    bad = tmp_path / "bad.pol"
    bad.write_text("default reject\npolicy p priority when\n")
    assert main(["validate", "--policies", str(bad)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_cli_version(capsys):
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip() == "0.1.0"
