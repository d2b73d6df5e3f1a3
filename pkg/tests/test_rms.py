import pytest
from hypothesis import given, strategies as st

from cnqf.errors import (
    BadParams,
    CapacityViolation,
    DuplicateAllocation,
    IllegalState,
    IllegalTransition,
    NoPath,
    ScopeError,
    UnknownElement,
    UnknownSession,
    UnmappedClass,
    ValidationError,
)
from cnqf.policy import FactBase, parse_policy_set
from cnqf.rms import (
    LEGAL_EDGES,
    TRANSITIONS,
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
    end_to_end_admission,
    map_qos_class,
    release,
    reserve,
    resize_across,
    segment_admission,
    serialize_ledgers,
    transition,
)
from cnqf.topology import CORE

from conftest import make_topology
from oracles import DictLedger


def req(sid="s1", kbps=30000, user="u1", src="a1", dst="c2", **kw):
    return QoSRequest(sid, user, src, dst, kw.pop("service_class", "streaming"), kbps, **kw)


@pytest.fixture
def chain():
    # a1 -L1- gw1 -L2- c1 -L3- c2
    return make_topology(
        [("L1", "a1", "gw1", 100000), ("L2", "gw1", "c1", 100000), ("L3", "c1", "c2", 50000)],
        elements={"a1": "an1", "gw1": "an1"},
    )


def ledgers_of(topo):
    return {s: ReservationLedger.for_scope(topo, s) for s in topo.scopes()}


# -- broker roles -----------------------------------------------------------

def test_broker_roles():
    topo = make_topology(
        [("L1", "a1", "c1", 10), ("L2", "b1", "c1", 10)],
        elements={"a1": "an1", "b1": "an2"},
        access={"an1": "wifi", "an2": "cable"},
    )
    roles = brokers_for(topo)
    assert {s: r.role for s, r in roles.items()} == {"an1": "WARB", "an2": "FARB", CORE: "CNRB"}
    assert roles[CORE].entity_id == "cnrb"
    assert roles["an1"].entity_id == "warb.an1"
    with pytest.raises(ValidationError):
        BrokerRole("CNRB", "an1")


# -- segment admission ------------------------------------------------------

def test_segment_admits_within_capacity(chain, admit_all):
    ledger = ReservationLedger.for_scope(chain, "an1")
    ledger.reserve("s0", ["L1"], 60000)
    v = segment_admission(brokers_for(chain)["an1"], req(kbps=30000), ["L1"], ledger, admit_all)
    assert v.admit and v.reason == "ok"


def test_segment_rejects_first_violating_link(chain, admit_all):
    ledger = ReservationLedger.for_scope(chain, "an1")
    ledger.reserve("s0", ["L1"], 60000)
    v = segment_admission(brokers_for(chain)["an1"], req(kbps=50000), ["L1", "L2"], ledger, admit_all)
    assert not v.admit
    assert v.reason == "insufficient capacity on L1"
    assert v.violating_link == "L1"


def test_policy_reject_precedes_capacity(chain):
    ps = parse_policy_set(
        'policy p_block priority 10 when request(user_id) == "blocked" then reject\n'
        'policy ok priority 1 when true then admit\n'
    )
    ledger = ReservationLedger.for_scope(chain, "an1")
    v = segment_admission(brokers_for(chain)["an1"], req(kbps=1, user="blocked"), ["L1"], ledger, ps)
    assert not v.admit and v.reason == "policy p_block"
    v = segment_admission(brokers_for(chain)["an1"], req(kbps=1), ["L1"], ledger, parse_policy_set(""))
    assert v.reason == "default reject"


def test_segment_scope_error(chain, admit_all):
    ledger = ReservationLedger.for_scope(chain, "an1")
    with pytest.raises(ScopeError):
        segment_admission(brokers_for(chain)["an1"], req(), ["L3"], ledger, admit_all)
    with pytest.raises(ScopeError):
        segment_admission(brokers_for(chain)[CORE], req(), ["L1"], ledger, admit_all)


# -- end to end -------------------------------------------------------------

def test_end_to_end_admit(chain, admit_all):
    ledgers = ledgers_of(chain)
    d = end_to_end_admission(req(kbps=20000), chain, ledgers, admit_all)
    assert d.admitted
    assert d.path == ("L1", "L2", "L3")
    assert [s.scope for s in d.segments] == ["an1", CORE]
    assert ledgers["an1"].reserved == {"L1": 20000, "L2": 20000}
    assert ledgers[CORE].reserved == {"L3": 20000}
    session = transition(Session.open(req(kbps=20000)), "admitted")
    assert session.state is SessionState.ADMITTED


def test_core_reject_rolls_back_access(chain, admit_all):
    ledgers = ledgers_of(chain)
    ledgers[CORE].reserve("bulk", ["L3"], 50000)
    before = serialize_ledgers(ledgers)
    d = end_to_end_admission(req(kbps=1000), chain, ledgers, admit_all)
    assert not d.admitted
    assert d.segments[0].admit and not d.segments[1].admit
    assert "insufficient capacity on L3" in d.reason
    assert serialize_ledgers(ledgers) == before


def test_no_path(admit_all):
    topo = make_topology([("L1", "a1", "c1", 10), ("L2", "c2", "c3", 10)], elements={"a1": "an1"})
    with pytest.raises(NoPath):
        end_to_end_admission(req(dst="c3"), topo, ledgers_of(topo), admit_all)


def test_external_destination_stub(chain, admit_all):
    ledgers = ledgers_of(chain)
    d = end_to_end_admission(req(dst="elsewhere"), chain, ledgers, admit_all)
    assert not d.admitted and d.reason == "inter-domain brokerage not supported"
    assert all(l.is_empty() for l in ledgers.values())


def test_per_scope_policy_sets(chain, admit_all):
    ledgers = ledgers_of(chain)
    sets = {"an1": admit_all, CORE: parse_policy_set("default reject")}
    before = serialize_ledgers(ledgers)
    d = end_to_end_admission(req(), chain, ledgers, sets)
    assert not d.admitted and d.reason.startswith("CNRB core: default reject")
    assert serialize_ledgers(ledgers) == before


@given(st.integers(1, 150000), st.integers(0, 100000))
def test_rejection_monotone_in_bandwidth(kbps, extra):
    topo = make_topology(
        [("L1", "a1", "gw1", 100000), ("L2", "gw1", "c1", 100000), ("L3", "c1", "c2", 50000)],
        elements={"a1": "an1", "gw1": "an1"},
    )
    ps = parse_policy_set("policy all priority 1 when true then admit")
    ledgers = ledgers_of(topo)
    ledgers["an1"].reserve("bg", ["L1"], 40000)
    d = end_to_end_admission(req(kbps=kbps), topo, ledgers, ps)
    if d.admitted:
        return
    bigger = end_to_end_admission(req(sid="s2", kbps=kbps + extra + 1), topo, ledgers, ps)
    assert not bigger.admitted


# -- ledger -----------------------------------------------------------------

def test_reserve_release_round_trip():
    ledger = ReservationLedger({"L1": 100000, "L2": 100000})
    empty = ledger.serialize()
    reserve(ledger, "s1", ["L1", "L2"], 30000)
    assert ledger.reserved == {"L1": 30000, "L2": 30000}
    with pytest.raises(DuplicateAllocation):
        reserve(ledger, "s1", ["L1"], 1)
    with pytest.raises(ValidationError, match="bandwidth must be positive"):
        reserve(ledger, "s2", ["L1"], 0)
    release(ledger, "s1")
    assert ledger.reserved == {"L1": 0, "L2": 0}
    assert ledger.serialize() == empty
    with pytest.raises(UnknownSession):
        release(ledger, "s_missing")


def test_capacity_violation_is_defensive():
    ledger = ReservationLedger({"L1": 10})
    with pytest.raises(CapacityViolation):
        ledger.reserve("s1", ["L1"], 11)
    assert ledger.is_empty()


def test_interleaved_equals_survivor_alone():
    caps = {"L1": 100000, "L2": 100000}
    a = ReservationLedger(caps)
    a.reserve("s1", ["L1", "L2"], 30000)
    a.reserve("s2", ["L2"], 10000)
    a.release("s1")
    b = ReservationLedger(caps)
    b.reserve("s2", ["L2"], 10000)
    assert a.serialize() == b.serialize()


def test_resize_atomic():
    ledger = ReservationLedger({"L1": 100, "L2": 100})
    ledger.reserve("s1", ["L1"], 50)
    ledger.reserve("s2", ["L2"], 80)
    before = ledger.serialize()
    with pytest.raises(CapacityViolation):
        ledger.resize("s1", 30, links=["L1", "L2"])
    assert ledger.serialize() == before
    old = ledger.resize("s1", 100)
    assert old.kbps == 50 and ledger.reserved["L1"] == 100


def test_resize_across_compensates():
    ledgers = {"an1": ReservationLedger({"L1": 100}, "an1"), CORE: ReservationLedger({"L2": 100})}
    ledgers["an1"].reserve("s1", ["L1"], 10)
    ledgers[CORE].reserve("s1", ["L2"], 10)
    ledgers[CORE].reserve("big", ["L2"], 80)
    before = serialize_ledgers(ledgers)
    with pytest.raises(CapacityViolation):
        resize_across(ledgers, "s1", 50)
    assert serialize_ledgers(ledgers) == before
    resize_across(ledgers, "s1", 20)
    assert ledgers["an1"].reserved["L1"] == 20 and ledgers[CORE].reserved["L2"] == 100


ops = st.lists(
    st.tuples(st.sampled_from(["reserve", "release", "resize"]), st.integers(0, 5),
              st.lists(st.sampled_from(["L1", "L2", "L3"]), min_size=1, max_size=3, unique=True),
              st.integers(1, 70)),
    max_size=40,
)


@given(ops)
def test_ledger_matches_from_scratch_rebuild(sequence):
    caps = {"L1": 100, "L2": 150, "L3": 60}
    ledger = ReservationLedger(caps)
    oracle = DictLedger(caps)
    for op, n, links, kbps in sequence:
        sid = f"s{n}"
        if op == "reserve":
            ok = sid not in oracle.allocs and oracle.fits(links, kbps)
            try:
                ledger.reserve(sid, links, kbps)
                assert ok
                oracle.allocs[sid] = (tuple(links), kbps)
            except (DuplicateAllocation, CapacityViolation):
                assert not ok
        elif op == "release":
            try:
                ledger.release(sid)
                assert sid in oracle.allocs
                del oracle.allocs[sid]
            except UnknownSession:
                assert sid not in oracle.allocs
        else:
            if sid not in oracle.allocs:
                with pytest.raises(UnknownSession):
                    ledger.resize(sid, kbps)
                continue
            ok = oracle.fits(oracle.allocs[sid][0], kbps, skip=sid)
            try:
                ledger.resize(sid, kbps)
                assert ok
                oracle.allocs[sid] = (oracle.allocs[sid][0], kbps)
            except CapacityViolation:
                assert not ok
        ledger.check_invariants()
        assert ledger.reserved == oracle.snapshot()
    for sid in list(ledger.allocations):
        ledger.release(sid)
    assert ledger.is_empty()


# -- QoS mapping ------------------------------------------------------------

@pytest.mark.parametrize("tech, l2, dscp", [("wimax", "UGS", 46), ("wifi", "AC_BK", 8), ("xdsl", "streaming", 34)])
def test_default_mapping(tech, l2, dscp):
    assert map_qos_class(QoSMappingTable.default(), tech, l2) == dscp


def test_unmapped_class():
    with pytest.raises(UnmappedClass):
        map_qos_class(QoSMappingTable.default(), "wimax", "bogus")


def test_mapping_table_rejects_bad_dscp():
    with pytest.raises(ValidationError):
        QoSMappingTable.from_dict({"wimax": {"UGS": 64}})


def test_service_class_to_l2():
    table = QoSMappingTable.default()
    assert table.l2_class("wimax", "conversational") == "UGS"
    assert table.l2_class("xdsl", "background") == "background"


# -- enforcement ------------------------------------------------------------

def test_apply_config_and_idempotence(chain):
    store = {}
    cmd = ConfigCommand("gw1", "set_dscp", {"session": "s1", "dscp": 46}, "warb.an1", "d1")
    assert apply_config(store, cmd, chain) == "CONFIGURE"
    assert store["gw1"]["dscp"] == {"s1": 46}
    snapshot = repr(store)
    assert apply_config(store, cmd, chain) == "CONFIG_NOOP"
    assert repr(store) == snapshot


def test_apply_config_errors(chain):
    with pytest.raises(BadParams):
        apply_config({}, ConfigCommand("gw1", "set_route", {"session": "s1", "links": ["L1", "L3"]}, "x", "d1"), chain)
    with pytest.raises(BadParams):
        apply_config({}, ConfigCommand("gw1", "set_dscp", {"session": "s1", "dscp": 64}, "x", "d1"), chain)
    with pytest.raises(BadParams):
        apply_config({}, ConfigCommand("gw1", "set_route", {"session": "s1", "links": ["L9"]}, "x", "d1"), chain)
    with pytest.raises(UnknownElement):
        apply_config({}, ConfigCommand("zz", "set_dscp", {"session": "s1", "dscp": 1}, "x", "d1"), chain)
    with pytest.raises(BadParams, match="causing decision"):
        ConfigCommand("gw1", "set_dscp", {"session": "s1", "dscp": 1}, "x", "")


def test_route_and_clear(chain):
    store = {}
    apply_config(store, ConfigCommand("a1", "set_route", {"session": "s1", "links": ["L1", "L2", "L3"]}, "x", "d1"), chain)
    apply_config(store, ConfigCommand("a1", "set_queue_weight", {"session": "s1", "kbps": 500}, "x", "d2"), chain)
    assert store["a1"]["route"]["s1"] == ("L1", "L2", "L3")
    assert apply_config(store, ConfigCommand("a1", "clear_session", {"session": "s1"}, "x", "d3"), chain) == "CONFIGURE"
    assert store["a1"] == {"dscp": {}, "route": {}, "queue": {}}
    assert apply_config(store, ConfigCommand("a1", "clear_session", {"session": "s1"}, "x", "d3"), chain) == "CONFIG_NOOP"


# -- session lifecycle ------------------------------------------------------

def active_session(last_activity=1000):
    s = Session.open(req(), now=last_activity)
    return transition(transition(s, "admitted"), "activate")


def test_inactivity_boundary():
    s = active_session(1000)
    assert detect_inactivity(s, 31000, 30000)
    assert not detect_inactivity(s, 30999, 30000)


def test_inactivity_on_terminated_session():
    s = transition(transition(active_session(), "terminate"), "terminated")
    with pytest.raises(IllegalState):
        detect_inactivity(s, 99999)


def test_transitions():
    s = Session.open(req())
    assert transition(s, "admitted").state is SessionState.ADMITTED
    a = active_session()
    assert transition(transition(a, "adapt_begin"), "adapt_done").state is SessionState.ACTIVE
    done = transition(transition(a, "terminate"), "terminated")
    with pytest.raises(IllegalTransition) as info:
        transition(done, "admitted")
    assert info.value.state == "TERMINATED" and info.value.event == "admitted"


@given(st.lists(st.sampled_from(sorted({e for _, e in TRANSITIONS})), max_size=12))
def test_transition_walks_stay_legal(events):
    s = Session.open(req())
    for event in events:
        try:
            nxt = transition(s, event)
        except IllegalTransition:
            assert (s.state, event) not in TRANSITIONS
            continue
        assert (s.state, nxt.state) in LEGAL_EDGES
        s = nxt


def test_request_validation():
    with pytest.raises(ValidationError):
        req(kbps=0)
    with pytest.raises(ValidationError):
        req(service_class="premium")
    with pytest.raises(ValidationError):
        req(max_loss_rate=1.5)
    assert req(media_kind="video").facts()["media_kind"] == "video"
