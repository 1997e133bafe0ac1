import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relpairs import synth
from relpairs.ingest import (HISTORY_LEN, FlightStore, FlightUpdateMessage, MessageParseError, ingest_lines,
                             parse_message, read_messages)
from relpairs.route_graph import build_route_graph

KLM53Q_RECORD = {
    "msg_time": "2024-03-05T10:50:14Z",
    "callsign": "KLM53Q",
    "adep": "EHAM",
    "ades": "EGGD",
    "waypoints": ["JACKO", "MANGO", "BRASO", "LAM", "POMAX"],
    "times": ["2024-03-05T11:33:00Z", "2024-03-05T11:35:30Z", "2024-03-05T11:35:54Z",
              "2024-03-05T11:38:00Z", "2024-03-05T11:49:42Z"],
}


def test_parse_klm53q_record():
    m = parse_message(json.dumps(KLM53Q_RECORD))
    assert (m.callsign, m.origin, m.destination) == ("KLM53Q", "EHAM", "EGGD")
    assert m.waypoints == ("JACKO", "MANGO", "BRASO", "LAM", "POMAX")
    assert m.times[-1] - m.times[0] == 16 * 60 + 42
    assert parse_message(m.to_line()) == m


@pytest.mark.parametrize("patch,reason", [
    ({"times": KLM53Q_RECORD["times"][:4]}, "length mismatch"),
    ({"times": KLM53Q_RECORD["times"][::-1]}, "non-monotone predicted times"),
    ({"times": ["2024-03-05T11:33:00Z"] * 5}, "non-monotone predicted times"),
    ({"msg_time": "yesterday"}, "malformed timestamp"),
    ({"times": KLM53Q_RECORD["times"][:4] + ["11:49:42"]}, "malformed timestamp"),
    ({"callsign": "bad callsign!"}, "invalid callsign"),
    ({"waypoints": ["JACKO"], "times": KLM53Q_RECORD["times"][:1]}, "need at least two waypoints"),
])
def test_parse_rejections(patch, reason):
    with pytest.raises(MessageParseError) as info:
        parse_message(json.dumps({**KLM53Q_RECORD, **patch}))
    assert info.value.reason == reason


def test_parse_missing_field_and_bad_json():
    obj = dict(KLM53Q_RECORD)
    del obj["times"]
    with pytest.raises(MessageParseError) as info:
        parse_message(json.dumps(obj))
    assert info.value.field_path == "times"
    with pytest.raises(MessageParseError):
        parse_message("{not json")
    with pytest.raises(MessageParseError):
        parse_message("[1, 2]")


@pytest.fixture(scope="module")
def world():
    spec = synth.crossing_flows_preset(seed=9, start="2025-05-14T08:00:00Z", duration_h=2.0)
    return synth.generate_world(spec)


@pytest.fixture(scope="module")
def ctx(world):
    return build_route_graph(world.plans(), world.spec.sector)


def _shift(m: FlightUpdateMessage, msg_dt=0.0, times_dt=0.0) -> FlightUpdateMessage:
    return FlightUpdateMessage(m.msg_time + msg_dt, m.callsign, m.origin, m.destination, m.waypoints,
                               tuple(t + times_dt for t in m.times))


def test_first_message_then_stale(world, ctx):
    store = FlightStore(ctx)
    m = world.messages()[0]
    assert store.apply(m)
    assert store.records[m.callsign].status == "mapped"
    assert not store.apply(_shift(m, -60.0, 600.0))
    assert not store.apply(m)
    assert store.diagnostics["stale"] == 2
    assert store.records[m.callsign].message == m


def test_time_shift_moves_timeline_exactly(world, ctx):
    store = FlightStore(ctx)
    m = world.messages()[0]
    store.apply(m)
    before = store.records[m.callsign].timeline.mu.copy()
    store.apply(_shift(m, 60.0, 360.0))
    after = store.records[m.callsign].timeline.mu
    np.testing.assert_allclose(after - before, 360.0, atol=1e-6)


def test_history_is_bounded(world, ctx):
    store = FlightStore(ctx)
    m = world.messages()[0]
    for k in range(HISTORY_LEN + 5):
        store.apply(_shift(m, 10.0 * k, 10.0 * k))
    hist = store.records[m.callsign].history
    assert len(hist) == HISTORY_LEN
    assert hist[-1].msg_time == m.msg_time + 10.0 * (HISTORY_LEN + 4)


def test_unmapped_flight_excluded_from_snapshot(ctx):
    store = FlightStore(ctx)
    m = parse_message(json.dumps(KLM53Q_RECORD))
    store.apply(m)
    assert store.records["KLM53Q"].status == "unmapped"
    assert store.diagnostics["unmapped"] == 1
    assert "KLM53Q" not in store.snapshot()


def test_expire(world, ctx):
    store = FlightStore(ctx)
    m = world.messages()[0]
    store.apply(m)
    tl = store.records[m.callsign].timeline
    assert store.expire(m.msg_time + 60.0) == []  # fresh
    spanning = m.msg_time + 2 * 3600.0
    if tl.mu[-1] > spanning:
        assert store.expire(spanning) == []
    late = tl.mu[-1] + 3600.0
    assert store.expire(max(late, m.msg_time + 2 * 3600.0)) == [m.callsign]
    assert not store.records


def test_expire_keeps_stale_flight_still_in_the_air(ctx, world):
    store = FlightStore(ctx)
    m = world.messages()[0]
    # predicted times far in the future keep the timeline spanning "now"
    late = _shift(m, 0.0, 3 * 3600.0)
    store.apply(late)
    assert store.expire(m.msg_time + 2 * 3600.0) == []


def test_snapshot_is_read_only(world, ctx):
    store = FlightStore(ctx)
    store.apply_all(world.messages()[:5])
    snap = store.snapshot()
    with pytest.raises(TypeError):
        snap["X"] = None  # type: ignore[index]
    store.apply_all(world.messages()[5:10])
    assert len(snap) == 5


def test_idempotent(world, ctx):
    a, b = FlightStore(ctx), FlightStore(ctx)
    msgs = world.messages()[:20]
    a.apply_all(msgs)
    b.apply_all(msgs + msgs)
    assert a.state() == b.state()


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False))
def test_out_of_order_resilience(ctx, world, rnd):
    base = world.messages()[:12]
    log = base + [_shift(m, 120.0, 240.0) for m in base[::2]]
    ref = FlightStore(ctx)
    ref.apply_all(sorted(log, key=lambda m: m.msg_time))
    shuffled = list(log)
    rnd.shuffle(shuffled)
    other = FlightStore(ctx)
    other.apply_all(shuffled)
    assert other.state() == ref.state()


def _corrupt(line: str, kind: int) -> str:
    obj = json.loads(line)
    if kind == 0:
        obj["times"] = obj["times"][:-1]
    else:
        obj["times"] = obj["times"][::-1]
    return json.dumps(obj)


def test_corrupted_log_matches_clean_subset(world, ctx):
    lines = [m.to_line() for m in world.messages()]
    rng = np.random.default_rng(0)
    bad = set(rng.choice(len(lines), size=max(1, len(lines) // 20), replace=False).tolist())
    mixed = [(_corrupt(ln, i % 2) if i in bad else ln) for i, ln in enumerate(lines)]
    dirty = FlightStore(ctx)
    report = ingest_lines(dirty, mixed)
    assert sorted(n - 1 for n, _ in report.rejected) == sorted(bad)
    clean = FlightStore(ctx)
    ingest_lines(clean, [ln for i, ln in enumerate(lines) if i not in bad])
    assert dirty.state() == clean.state()


def test_read_messages_skips_blank_lines():
    msgs, report = read_messages(["", json.dumps(KLM53Q_RECORD), "   ", "oops"])
    assert len(msgs) == 1 and report.accepted == 1 and report.rejected[0][0] == 4


def test_concurrent_snapshots_never_see_partial_records(world, ctx):
    store = FlightStore(ctx)
    msgs = world.messages()
    errors = []

    def reader():
        for _ in range(200):
            for tl in store.snapshot().values():
                if len(tl.mu) != len(tl.path):
                    errors.append(tl.callsign)

    th = threading.Thread(target=reader)
    th.start()
    store.apply_all(msgs)
    th.join()
    assert not errors
    assert len(store.snapshot()) == len({m.callsign for m in msgs}) - store.diagnostics["unmapped"] \
        - store.diagnostics["off_graph"]

