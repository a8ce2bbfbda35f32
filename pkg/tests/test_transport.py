import socket
import pytest

from sa2fe import wire
from sa2fe.scenario import World
from sa2fe.transport import FaultPlan, FaultRule, LoopbackNetwork, TcpNetwork, read_frame
from sa2fe.wire import MsgType


class Echo:
    """Replies to every USER_ABORT with a USER_ABORT carrying ``name:reason``."""

    def __init__(self, name, peer=None, count=0):
        self.name = name
        self.peer = peer
        self.count = count
        self.seen = []

    def handle(self, msg, reply):
        self.seen.append(msg["reason"])
        if self.count <= 0:
            return []
        self.count -= 1
        return [(reply, wire.make(MsgType.USER_ABORT, reason=f"{self.name}:{msg['reason']}"))]


def test_loopback_fifo_per_pair():
    net = LoopbackNetwork()
    a, b = net.add(Echo("a")), net.add(Echo("b"))
    for i in range(5):
        net.send("a", "b", wire.make(MsgType.USER_ABORT, reason=str(i)))
    net.run()
    assert b.seen == ["0", "1", "2", "3", "4"]
    assert a.seen == []


def test_loopback_reorder_keeps_pair_fifo():
    net = LoopbackNetwork(reorder=True)
    net.add(Echo("x"))
    sink = net.add(Echo("sink"))
    for i in range(20):
        net.send("x", "sink", wire.make(MsgType.USER_ABORT, reason=f"x{i}"))
        net.send("y", "sink", wire.make(MsgType.USER_ABORT, reason=f"y{i}"))
    net.run()
    xs = [s for s in sink.seen if s[0] == "x"]
    ys = [s for s in sink.seen if s[0] == "y"]
    assert xs == [f"x{i}" for i in range(20)] and ys == [f"y{i}" for i in range(20)]
    assert sink.seen != sorted(sink.seen, key=lambda s: (int(s[1:]), s[0]))  # interleaving happened


def test_fault_drop_duplicate_delay():
    is_abort = lambda s, d, m: m.kind is MsgType.USER_ABORT  # noqa: E731
    plan = FaultPlan([FaultRule("drop", is_abort), FaultRule("duplicate", is_abort),
                      FaultRule("delay", is_abort, delay_steps=3)])
    net = LoopbackNetwork(faults=plan)
    sink = net.add(Echo("sink"))
    for i in range(4):
        net.send("src", "sink", wire.make(MsgType.USER_ABORT, reason=str(i)))
    net.run()
    assert len(net.dropped) == 1
    # 0 dropped, 1 duplicated, 2 delayed (and the pair stays FIFO behind it), 3 normal
    assert sink.seen == ["1", "1", "2", "3"]
    with pytest.raises(ValueError):
        FaultRule("explode", is_abort)


def test_loopback_unknown_party_and_digest():
    net = LoopbackNetwork()
    net.send("a", "ghost", wire.make(MsgType.USER_ABORT, reason="r"))
    assert net.run() == 1
    d1 = net.trace_digest()
    net2 = LoopbackNetwork()
    net2.send("a", "ghost", wire.make(MsgType.USER_ABORT, reason="r"))
    net2.run()
    assert net2.trace_digest() == d1


def test_world_survives_duplicated_frames(fast_config, fast_keys):
    dup = lambda s, d, m: m.kind in (MsgType.OFFLOAD_REQUEST, MsgType.FORWARD_REQUEST, MsgType.ES_RESPONSE)  # noqa: E731
    plan = FaultPlan([FaultRule("duplicate", dup, times=100)])
    world = World(fast_config, fast_keys, net=LoopbackNetwork(faults=plan)).setup()
    s = world.offload("s1", b"dup")
    assert s.status == "done" and s.resp_data == b"dup"
    # the duplicated request must not be forwarded twice
    assert len(world.bs.forwarded) == 1
    assert world.check_invariants() == []


def test_world_dropped_response_is_safe(fast_config, fast_keys):
    drop = lambda s, d, m: m.kind is MsgType.ES_RESPONSE  # noqa: E731
    world = World(fast_config, fast_keys, net=LoopbackNetwork(faults=FaultPlan([FaultRule("drop", drop)]))).setup()
    lost = world.offload("s1", b"a")
    assert lost.status == "requested"
    ok = world.offload("s1", b"b")
    assert ok.status == "done"
    assert world.check_invariants() == []


def test_tcp_roundtrip():
    with TcpNetwork() as net:
        a = net.add(Echo("a", count=0))
        b = net.add(Echo("b", count=3))
        for i in range(3):
            net.send("a", "b", wire.make(MsgType.USER_ABORT, reason=str(i)))
        net.wait_until(lambda: len(a.seen) == 3, timeout=10)
        net.run(timeout=10)
        assert b.seen == ["0", "1", "2"]
        assert a.seen == ["b:0", "b:1", "b:2"]


def _closed_by_server(s) -> bool:
    try:
        return read_frame(s) is None
    except ConnectionResetError:
        return True


def test_tcp_bad_frame_dropped():
    with TcpNetwork() as net:
        b = net.add(Echo("b"))
        addr = net.directory["b"]
        good = wire.encode(wire.make(MsgType.USER_ABORT, reason="ok"))
        unknown = bytearray(good)
        unknown[5] = 0xEE  # unknown type: the header itself is rejected
        for junk in (bytes(unknown), b"NOPE" + bytes(22)):
            with socket.create_connection(addr) as s:
                s.sendall(junk)
                assert _closed_by_server(s)  # stream cannot be resynchronised
        # a well-framed but undecodable payload is dropped and the connection survives
        trailing = bytearray(good + b"\0")
        trailing[22:26] = (len(trailing) - wire.HEADER_LEN).to_bytes(4, "big")
        with socket.create_connection(addr) as s:
            s.sendall(bytes(trailing) + good)
            s.shutdown(socket.SHUT_WR)
            assert read_frame(s) is None
        net.wait_until(lambda: b.seen == ["ok"], timeout=5)
        assert b.seen == ["ok"]


def test_world_over_tcp(fast_config, fast_keys):
    with TcpNetwork() as net:
        world = World(fast_config, fast_keys, net=net).setup()
        got = [world.offload(s, f"{s}-{i}".encode()) for i in range(3) for s in ("s1", "s2")]
        assert all(s.status == "done" for s in got)
        for s in got:
            es = world.served_by(s)
            assert es in (("e1", "e3") if s.s_type == "s1" else ("e1", "e2"))
        world.claim_all()
        assert world.fa.ledger.totals() == {"bs": 6, "es": 18, "sp": 12}
        assert world.check_invariants() == []
