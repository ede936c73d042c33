#!/usr/bin/env python3
import pytest
from hypothesis import given, settings, strategies as st

from bus import (Bus, BusConfig, BusEvent, EmptyContention, Frame, FrameId, IdWidth,
                 InvalidFrameId, OfferInPast, OversizePayload, UnknownNode, arbitrate,
                 frame_time, read_trace, write_trace)


def make_bus(nodes=(1, 2, 3), cfg=None):
    bus = Bus(cfg)
    received = {node: [] for node in nodes}
    for node in nodes:
        bus.register(node, received[node].append)
    return bus, received


def test_frame_time_defaults():
    cfg = BusConfig()
    assert frame_time(Frame(FrameId(0x100), bytes(8)), cfg) == 888
    assert frame_time(Frame(FrameId(0x100)), cfg) == 376


def test_frame_time_halves_with_double_bitrate():
    frame = Frame(FrameId(0x100), bytes(8))
    slow = frame_time(frame, BusConfig(125000))
    fast = frame_time(frame, BusConfig(250000))
    assert abs(fast - slow / 2) <= 1


def test_arbitrate():
    assert arbitrate([Frame(FrameId(0x7FF))]).id.value == 0x7FF
    assert arbitrate([Frame(FrameId(0x100)), Frame(FrameId(0x0FF))]).id.value == 0x0FF
    with pytest.raises(EmptyContention):
        arbitrate([])


@given(st.sets(st.integers(0, 0x7FF), min_size=1, max_size=100))
def test_repeated_arbitration_is_ascending(ids):
    pool = [Frame(FrameId(i)) for i in ids]
    order = []
    while pool:
        winner = arbitrate(pool)
        order.append(winner.id.value)
        pool.remove(winner)
    assert order == sorted(ids)


def test_frame_limits():
    with pytest.raises(OversizePayload):
        Frame(FrameId(0x100), bytes(9))
    with pytest.raises(InvalidFrameId):
        FrameId(0x800)
    assert FrameId(0x800, IdWidth.EXTENDED29).extended


def test_single_offer_reaches_other_nodes():
    bus, received = make_bus()
    bus.offer(Frame(FrameId(0x100), b"\x01"), 1, 0)
    events = bus.step(10_000)
    assert len(events) == 1
    assert events[0].time == frame_time(events[0].frame, bus.cfg)
    assert received[1] == []
    assert received[2] == events and received[3] == events


def test_loopback_listener_sees_own_frames():
    bus = Bus()
    own = []
    bus.register(1, own.append, loopback=True)
    bus.register(2)
    bus.offer(Frame(FrameId(0x100)), 1, 0)
    bus.step(1000)
    assert len(own) == 1


def test_simultaneous_offers_deliver_by_identifier():
    bus, _ = make_bus()
    for node, ident in ((1, 0x300), (2, 0x100), (3, 0x200)):
        bus.offer(Frame(FrameId(ident), bytes(8)), node, 0)
    events = bus.step(10_000)
    assert [e.frame.id.value for e in events] == [0x100, 0x200, 0x300]
    assert [e.time for e in events] == [888, 1776, 2664]


def test_step_without_pending_frames():
    bus, _ = make_bus()
    assert bus.step(5000) == []
    assert bus.next_completion() is None


def test_offer_errors():
    bus, _ = make_bus()
    with pytest.raises(UnknownNode):
        bus.offer(Frame(FrameId(0x100)), 9, 0)
    bus.step(1000)
    with pytest.raises(OfferInPast):
        bus.offer(Frame(FrameId(0x100)), 1, 500)


def test_flush_discards_pending():
    bus, _ = make_bus()
    bus.offer(Frame(FrameId(0x100)), 1, 0)
    bus.offer(Frame(FrameId(0x101)), 1, 0)
    assert bus.flush(1) == 2
    assert bus.step(10_000) == []
    assert bus.flushed == 2


def test_node_queue_is_fifo():
    # キューの先頭だけが調停に参加する
    bus, _ = make_bus()
    bus.offer(Frame(FrameId(0x300)), 1, 0)
    bus.offer(Frame(FrameId(0x050)), 1, 0)
    bus.offer(Frame(FrameId(0x200)), 2, 0)
    events = bus.step(10_000)
    assert [e.frame.id.value for e in events] == [0x200, 0x300, 0x050]


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 0x7FF), st.integers(0, 5000)), min_size=1,
                max_size=8, unique_by=lambda t: t[0]))
def test_arbitration_slots_never_lose_frames(offers):
    nodes = list(range(1, len(offers) + 1))
    bus, _ = make_bus(nodes)
    pending = dict(offers)
    for node, (ident, time) in zip(nodes, offers):
        bus.offer(Frame(FrameId(ident)), node, time)
    events = bus.step(10_000_000)
    assert len(events) == len(offers)
    for event in events:
        start = event.time - frame_time(event.frame, bus.cfg)
        del pending[event.frame.id.value]
        # スロット開始時点で待っていた他のフレームはすべて識別子が大きい
        assert all(ident > event.frame.id.value for ident, t in pending.items() if t <= start)
    assert not pending


def test_trace_file_round_trip(tmp_path):
    events = [BusEvent(888, Frame(FrameId(0x100), b"\x01\x02", 1)),
              BusEvent(2000, Frame(FrameId(0x10201, IdWidth.EXTENDED29), b"", 2))]
    path = tmp_path / "trace.csv"
    assert write_trace(events, path) == 2
    assert read_trace(path) == events
    assert path.read_text().splitlines()[0] == "time_us,src,id_hex,len,payload_hex"
