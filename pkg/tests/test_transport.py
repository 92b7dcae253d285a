import socket
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from securefl.errors import FrameError, ProtocolError, TransportError, VersionMismatch
from securefl.transport import (HEADER_SIZE, LatencyModel, MsgType, SimNetwork, SocketChannel, decode_frame,
                                encode_frame, run_parties)

from conftest import two_party


def ping_pong(k, size=8):
    def client(ch):
        for _ in range(k):
            ch.send("p1", MsgType.OPEN, b"x" * size)
            ch.recv("p1", MsgType.OPEN)

    def server(ch):
        for _ in range(k):
            ch.recv("p0", MsgType.OPEN)
            ch.send("p0", MsgType.OPEN, b"y" * size)

    return client, server


def test_zero_latency_ping_pong():
    _, _, net = two_party(*ping_pong(1))
    assert net.elapsed == 0.0
    assert net.meters["p0"].rounds == 1


def test_ten_ms_request_response():
    _, _, net = two_party(*ping_pong(1), latency=LatencyModel(10.0))
    assert net.elapsed == pytest.approx(0.020, abs=1e-12)


@given(st.integers(1, 12), st.sampled_from([0.5, 3.0, 10.0, 100.0]))
@settings(max_examples=25, deadline=None)
def test_k_round_trips_cost_2kd(k, d):
    _, _, net = two_party(*ping_pong(k), latency=LatencyModel(d))
    assert net.elapsed == pytest.approx(2 * k * d / 1000.0, rel=1e-12)
    assert net.meters["p0"].rounds == k


def test_bandwidth_adds_transfer_time():
    bw = 1000.0
    _, _, net = two_party(*ping_pong(1, size=77), latency=LatencyModel(10.0, bw))
    leg = (HEADER_SIZE + 77) / bw + 0.010
    assert net.elapsed == pytest.approx(2 * leg)


def test_meter_consistency_per_link():
    rng = np.random.default_rng(0)
    sizes = rng.integers(0, 500, size=20).tolist()

    def a(ch):
        for s in sizes:
            ch.send("p1", MsgType.SHARE, bytes(s))
        return ch.recv("p1")

    def b(ch):
        for _ in sizes:
            ch.recv("p0")
        ch.send("p0", MsgType.RESULT, b"done")

    _, _, net = two_party(a, b)
    m0, m1 = net.meters["p0"], net.meters["p1"]
    assert m0.bytes_sent == m1.bytes_received == sum(sizes) + HEADER_SIZE * len(sizes)
    assert m1.bytes_sent == m0.bytes_received
    assert m0.messages_sent == m1.messages_received == len(sizes)


def test_determinism_of_clocks_and_meters():
    lat = LatencyModel(7.0, 1e5)
    runs = [two_party(*ping_pong(5, 300), latency=lat)[2] for _ in range(3)]
    assert len({(n.elapsed, n.rounds, n.bytes_total) for n in runs}) == 1


def test_negative_delay_rejected():
    with pytest.raises(ValueError):
        LatencyModel(-1.0)


def test_closed_party_and_dropout():
    net = SimNetwork(["a", "b"])
    net.close("a")
    with pytest.raises(TransportError):
        net.channel("a").send("b", MsgType.OPEN, b"")
    with pytest.raises(TransportError):
        net.channel("b").recv("a")


def test_run_parties_reraises_root_cause():
    def bad(ch):
        raise ValueError("boom")

    def waiting(ch):
        return ch.recv("p0")

    with pytest.raises(ValueError, match="boom"):
        two_party(bad, waiting)


def test_error_frame_becomes_typed_exception():
    def a(ch):
        ch.send("p1", MsgType.ERROR, b"MaterialExhausted: out of masks")

    def b(ch):
        return ch.recv("p0", MsgType.OPEN)

    with pytest.raises(ProtocolError, match="out of masks") as info:
        two_party(a, b)
    assert type(info.value).__name__ == "MaterialExhausted"


def test_unexpected_tag_is_frame_error():
    with pytest.raises(FrameError):
        two_party(lambda ch: ch.send("p1", MsgType.SHARE, b""), lambda ch: ch.recv("p0", MsgType.OPEN))


def test_frame_codec():
    sid = bytes(range(16))
    frame = encode_frame(MsgType.KEYBLOCK, sid, b"payload")
    assert len(frame) == HEADER_SIZE + 7
    assert decode_frame(frame) == (MsgType.KEYBLOCK, 1, sid, b"payload")
    with pytest.raises(FrameError):
        decode_frame(frame[:-1])
    with pytest.raises(FrameError):
        decode_frame(frame[:4] + bytes([99]) + frame[5:])
    with pytest.raises(ValueError):
        encode_frame(MsgType.OPEN, b"short", b"")


def _socket_pair(sid=b"s" * 16):
    a, b = socket.socketpair()
    return SocketChannel(a, "p0", "p1", sid), SocketChannel(b, "p1", "p0", sid)


def test_socket_round_counts_match_simulator():
    c0, c1 = _socket_pair()
    client, server = ping_pong(4)
    t = threading.Thread(target=server, args=(c1,))
    t.start()
    client(c0)
    t.join()
    _, _, sim = two_party(*ping_pong(4))
    assert c0.meter.rounds == sim.meters["p0"].rounds == 4
    assert c0.meter.bytes_sent == c1.meter.bytes_received == sim.meters["p0"].bytes_sent
    c0.close()
    c1.close()


def test_socket_version_and_session_checks():
    c0, c1 = _socket_pair()
    c0.sock.sendall(encode_frame(MsgType.OPEN, c0.session_id, b"", version=2))
    with pytest.raises(VersionMismatch):
        c1.recv("p0")
    c0.send("p1", MsgType.OPEN, b"")
    c1.session_id = b"t" * 16
    with pytest.raises(FrameError, match="session"):
        c1.recv("p0")
    c0.close()
    with pytest.raises(TransportError):
        c1.recv("p0")
    c1.close()


def test_socket_rejects_garbage_length():
    a, b = socket.socketpair()
    chan = SocketChannel(b, "p1", "p0")
    a.sendall(b"\xff\xff\xff\xff" + bytes(30))
    with pytest.raises(FrameError):
        chan.recv("p0")
    a.close()
    chan.close()


def test_run_parties_collects_results():
    net = SimNetwork(["x", "y", "z"])
    res = run_parties(net, {n: (lambda ch: ch.name.upper()) for n in net.parties})
    assert res == {"x": "X", "y": "Y", "z": "Z"}
