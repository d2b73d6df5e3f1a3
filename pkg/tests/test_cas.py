from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from cnqf.cas import (
    AdaptationDirective,
    CodecTable,
    ContextRecord,
    ContextStore,
    InferenceRule,
    apply_adaptation,
    congestion_rules,
    format_context_line,
    infer,
    ingest,
    parse_context_line,
    select_codec,
)
from cnqf.errors import AdaptationFailed, IllegalState, NoFeasibleCodec, ParseError, ValidationError
from cnqf.mms import MeasurementRecord
from cnqf.rms import QoSRequest, ReservationLedger, Session, SessionState


def ctx(entity, attr, value, t, kind="device", source="src"):
    return ContextRecord(entity, kind, attr, value, source, t)


def test_ingest_first_value_is_a_change():
    store = ContextStore()
    change = ingest(store, ctx("phone1", "device_capability", 800, 5))
    assert (change.old, change.new, change.timestamp) == (None, 800, 5)


def test_ingest_same_value_is_silent():
    store = ContextStore()
    ingest(store, ctx("u1", "location", "office", 1, "user"))
    assert ingest(store, ctx("u1", "location", "office", 2, "user")) is None
    assert store.get("u1", "location") == "office"


def test_ingest_older_record_is_ignored():
    store = ContextStore()
    ingest(store, ctx("u1", "location", "home", 10, "user"))
    assert ingest(store, ctx("u1", "location", "office", 3, "user")) is None
    assert store.get("u1", "location") == "home"


def test_bool_and_int_are_different_values():
    store = ContextStore()
    ingest(store, ctx("L1", "congested", 1, 1, "link"))
    assert ingest(store, ctx("L1", "congested", True, 2, "link")) is not None


def test_record_validation():
    with pytest.raises(ValidationError):
        ctx("x", "location", "a", 0, kind="planet")
    with pytest.raises(ValidationError):
        ctx("x", "location", [1], 0)


values = st.one_of(st.sampled_from(["a", "b"]), st.integers(0, 2), st.booleans())


@given(st.lists(st.tuples(st.sampled_from(["e1", "e2"]), st.sampled_from(["location", "activity"]),
                          values, st.integers(0, 20)), max_size=40))
def test_store_keeps_newest_and_reports_only_real_changes(records):
    store = ContextStore()
    model = {}
    for entity, attr, value, t in records:
        change = store.ingest(ctx(entity, attr, value, t, "user"))
        key = (entity, attr)
        prev = model.get(key)
        if prev is not None and t < prev[1]:
            assert change is None
            continue
        same = prev is not None and type(prev[0]) is type(value) and prev[0] == value
        model[key] = (value, t)
        if same:
            assert change is None
        else:
            assert change is not None and change.new == value
            assert change.old == (None if prev is None else prev[0])
    for key, (value, _) in model.items():
        got = store.get(*key)
        assert got == value and type(got) is type(value)


def m(value, t, target="L1"):
    return MeasurementRecord("nm.an1", target, "utilization", value, t)


def test_infer_congested_after_sustained_high():
    out = infer(ContextStore(), congestion_rules(), [m(0.85, 1000), m(0.9, 2000)])
    assert [(r.entity_id, r.attribute, r.value, r.timestamp) for r in out] == [("L1", "congested", True, 2000)]


def test_infer_needs_every_sample_in_window():
    assert infer(ContextStore(), congestion_rules(), [m(0.85, 1000), m(0.7, 2000)]) == []


def test_inferred_value_already_known_is_deduplicated_by_store():
    store = ContextStore()
    history = [m(0.85, 1000), m(0.9, 2000)]
    assert store.ingest(infer(store, congestion_rules(), history)[0]) is not None
    history.append(m(0.95, 3000))
    assert store.ingest(infer(store, congestion_rules(), history)[0]) is None


def test_inference_rule_cannot_read_its_output():
    with pytest.raises(ValidationError):
        InferenceRule("loop", "link", "congested", True, "utilization", ">=", 0.8, requires=(("congested", False),))
    with pytest.raises(ValidationError):
        InferenceRule("bad", "link", "congested", True, "utilization", "~", 0.8)


@pytest.fixture(scope="module")
def codecs():
    return CodecTable.default()


@pytest.mark.parametrize("avail, name", [(2000, "H264_MED"), (4000, "H264_HIGH"), (1499, "H264_LOW"), (500, "H264_LOW")])
def test_select_video_codec(codecs, avail, name):
    assert select_codec(codecs, "video", avail) == name


def test_select_codec_infeasible(codecs):
    with pytest.raises(NoFeasibleCodec):
        select_codec(codecs, "video", 400)
    assert select_codec(codecs, "audio", 13) == "AMR_NB"


@given(st.dictionaries(st.text("ABC", min_size=1, max_size=3), st.integers(1, 50), min_size=1, max_size=6),
       st.integers(0, 60))
def test_select_codec_brute_force(table, avail):
    codecs = CodecTable.from_dict({"audio": table})
    fitting = sorted((-rate, name) for name, rate in table.items() if rate <= avail)
    if not fitting:
        with pytest.raises(NoFeasibleCodec):
            select_codec(codecs, "audio", avail)
    else:
        assert select_codec(codecs, "audio", avail) == fitting[0][1]


def test_codec_table_rejects_bad_entries():
    with pytest.raises(ValidationError):
        CodecTable.from_dict({"video": {"X": 0}})
    with pytest.raises(ValidationError):
        CodecTable.from_dict({"smell": {"X": 1}})
    with pytest.raises(ValidationError):
        CodecTable.from_dict({"video": {"X": 1}, "audio": {"X": 2}})


class LedgerBroker:
    def __init__(self, ledger):
        self.ledger = ledger

    def resize(self, session_id, kbps):
        self.ledger.resize(session_id, kbps)


def active_session(codec="H264_HIGH", kbps=4000):
    req = QoSRequest("s1", "u1", "a1", "c1", "streaming", kbps, media_kind="video", codec=codec)
    return replace(Session.open(req), state=SessionState.ACTIVE, path=("L1",))


def test_adapt_down(codecs):
    ledger = ReservationLedger({"L1": 5000}, "an1")
    ledger.reserve("s1", ["L1"], 4000)
    d = AdaptationDirective("s1", "codec", "H264_LOW", cause="cc1")
    out = apply_adaptation(d, active_session(), LedgerBroker(ledger), codecs)
    assert out.state is SessionState.ACTIVE
    assert (out.current_codec, out.current_bandwidth_kbps) == ("H264_LOW", 500)
    assert ledger.reserved_kbps("L1") == 500


def test_adapt_up_failure_leaves_everything_byte_equal(codecs):
    ledger = ReservationLedger({"L1": 3000}, "an1")
    ledger.reserve("s1", ["L1"], 1500)
    before = ledger.serialize()
    session = active_session("H264_MED", 1500)
    d = AdaptationDirective("s1", "codec", "H264_HIGH", cause="cc1")
    with pytest.raises(AdaptationFailed) as info:
        apply_adaptation(d, session, LedgerBroker(ledger), codecs)
    assert info.value.session == session
    assert ledger.serialize() == before


def test_adapt_terminated_session_is_illegal(codecs):
    session = replace(active_session(), state=SessionState.TERMINATED)
    with pytest.raises(IllegalState):
        apply_adaptation(AdaptationDirective("s1", "codec", "H264_LOW", cause="c"), session, None, codecs)


def test_adapt_same_bandwidth_skips_broker(codecs):
    d = AdaptationDirective("s1", "dscp", 46, cause="c")
    assert apply_adaptation(d, active_session(), None, codecs).current_bandwidth_kbps == 4000


def test_directive_needs_a_cause():
    with pytest.raises(ValidationError):
        AdaptationDirective("s1", "codec", "X", cause="")
    with pytest.raises(ValidationError):
        AdaptationDirective("s1", "volume", 3, cause="c")


def test_context_line_example():
    rec = parse_context_line("t=500 entity=device:phone1 attr=device_capability value=800 source=ops")
    assert rec == ContextRecord("phone1", "device", "device_capability", 800, "ops", 500)
    assert format_context_line(rec) == "t=500 entity=device:phone1 attr=device_capability value=800 source=ops"


@pytest.mark.parametrize("line", [
    "t=1 entity=device:x attr=a value=1",
    "t=1 entity=devicex attr=a value=1 source=s",
    "t=x entity=device:x attr=a value=1 source=s",
    "t=1 entity=galaxy:x attr=a value=1 source=s",
    "t=1 t=2 entity=device:x attr=a value=1 source=s",
])
def test_context_line_errors(line):
    with pytest.raises(ParseError):
        parse_context_line(line, 7)


@given(st.one_of(st.text(max_size=12), st.integers(-10**6, 10**6), st.booleans(),
                 st.floats(allow_nan=False, allow_infinity=False)),
       st.integers(0, 10**9))
def test_context_line_round_trip(value, t):
    rec = ctx("e1", "preference", value, t, "user")
    back = parse_context_line(format_context_line(rec))
    assert back == rec and type(back.value) is type(value)
