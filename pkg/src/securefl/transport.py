"""Message transport for the multi-party protocols.

Two backends share one channel interface (``send`` / ``recv`` / ``meter``):

* :class:`SimNetwork`: in-process links with a deterministic virtual clock.
  Each party keeps its own clock. A message sent at clock ``t`` over a link
  with one-way delay ``d`` and bandwidth ``bw`` arrives at
  ``max(t, link_free) + len/bw + d``; a blocking receive advances the
  receiver's clock to the arrival time. Since every party runs sequential
  code and links are FIFO, clocks and meters do not depend on thread
  scheduling.
* :class:`SocketChannel`: a length-prefixed frame stream over TCP.

Frame layout (little-endian)::

    u32 length | u8 type | u16 version | 16-byte session id | payload

``length`` counts every byte after the length field itself.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
import uuid
from dataclasses import dataclass, field

from .errors import FrameError, TransportError, VersionMismatch, remote_error

PROTOCOL_VERSION = 1
HEADER = struct.Struct("<IBH16s")
HEADER_SIZE = HEADER.size  # 23 bytes
MAX_FRAME = 1 << 30
RECV_TIMEOUT_S = 300.0


class MsgType(enum.IntEnum):
    HELLO = 1
    SHARE = 2
    OPEN = 3
    KEYBLOCK = 4
    RESULT = 5
    ERROR = 6


def new_session_id(rng=None) -> bytes:
    if rng is None:
        return uuid.uuid4().bytes
    return bytes(rng.integers(0, 256, size=16, dtype="u1"))


def encode_frame(tag: MsgType, session_id: bytes, payload: bytes, version: int = PROTOCOL_VERSION) -> bytes:
    if len(session_id) != 16:
        raise ValueError("session id must be 16 bytes")
    length = HEADER_SIZE - 4 + len(payload)
    return HEADER.pack(length, int(tag), version, session_id) + payload


def decode_frame(frame: bytes) -> tuple[MsgType, int, bytes, bytes]:
    """Split a complete frame into ``(tag, version, session_id, payload)``."""
    if len(frame) < HEADER_SIZE:
        raise FrameError("frame shorter than header")
    length, tag, version, sid = HEADER.unpack_from(frame, 0)
    if length != len(frame) - 4:
        raise FrameError(f"length field {length} does not match frame size {len(frame) - 4}")
    try:
        tag = MsgType(tag)
    except ValueError:
        raise FrameError(f"unknown message type {tag}") from None
    return tag, version, sid, frame[HEADER_SIZE:]


@dataclass
class Envelope:
    session_id: bytes
    sender: str
    receiver: str
    tag: MsgType
    payload: bytes
    sent_at: float
    deliver_at: float

    @property
    def size(self) -> int:
        return HEADER_SIZE + len(self.payload)


@dataclass(frozen=True)
class LatencyModel:
    """One-way delay in milliseconds and optional bandwidth in bytes per second."""

    delay_ms: float = 0.0
    bandwidth: float | None = None
    links: dict = field(default_factory=dict)  # (sender, receiver) -> (delay_ms, bandwidth)

    def __post_init__(self):
        if self.delay_ms < 0 or any(d < 0 for d, _ in self.links.values()):
            raise ValueError("delays must be non-negative")

    def link(self, sender: str, receiver: str) -> tuple[float, float | None]:
        return self.links.get((sender, receiver), (self.delay_ms, self.bandwidth))


@dataclass
class Meter:
    messages_sent: int = 0
    bytes_sent: int = 0
    messages_received: int = 0
    bytes_received: int = 0
    rounds: int = 0
    clock: float = 0.0  # simulated seconds
    _sent_since_recv: bool = False

    def on_send(self, nbytes: int) -> None:
        self.messages_sent += 1
        self.bytes_sent += nbytes
        self._sent_since_recv = True

    def on_recv(self, nbytes: int) -> None:
        self.messages_received += 1
        self.bytes_received += nbytes
        if self._sent_since_recv:
            self.rounds += 1
            self._sent_since_recv = False

    def snapshot(self) -> dict:
        return {
            "messages_sent": self.messages_sent,
            "bytes_sent": self.bytes_sent,
            "messages_received": self.messages_received,
            "bytes_received": self.bytes_received,
            "rounds": self.rounds,
            "clock": self.clock,
        }


_CLOSED = object()


class SimChannel:
    """One party's endpoint on a :class:`SimNetwork`."""

    def __init__(self, net: SimNetwork, name: str):
        self.net = net
        self.name = name
        self.meter = net.meters[name]

    @property
    def session_id(self) -> bytes:
        return self.net.session_id

    def send(self, to: str, tag: MsgType, payload: bytes) -> None:
        self.net._send(self.name, to, tag, payload)

    def recv(self, frm: str, expect: MsgType | None = None) -> bytes:
        env = self.net._recv(self.name, frm)
        if env.tag == MsgType.ERROR:
            raise remote_error(env.payload, frm)
        if expect is not None and env.tag != expect:
            raise FrameError(f"expected {expect.name} from {frm}, got {env.tag.name}", party=frm)
        return env.payload

    def close(self) -> None:
        self.net.close(self.name)


class SimNetwork:
    """In-process network between named parties with a shared transcript."""

    def __init__(self, parties, latency: LatencyModel | None = None, session_id: bytes | None = None,
                 record: bool = True):
        self.parties = list(parties)
        self.latency = latency or LatencyModel()
        self.session_id = session_id or bytes(16)
        self.record = record
        self.meters = {p: Meter() for p in self.parties}
        self.transcript: list[Envelope] = []
        self._queues = {(a, b): queue.Queue() for a in self.parties for b in self.parties if a != b}
        self._link_free = {k: 0.0 for k in self._queues}
        self._closed: set[str] = set()
        self._lock = threading.Lock()

    def channel(self, name: str) -> SimChannel:
        if name not in self.meters:
            raise KeyError(f"unknown party {name!r}")
        return SimChannel(self, name)

    def _send(self, sender: str, receiver: str, tag: MsgType, payload: bytes) -> None:
        if sender in self._closed:
            raise TransportError(f"party {sender} is closed", party=sender)
        if (sender, receiver) not in self._queues:
            raise TransportError(f"no link {sender} -> {receiver}", party=receiver)
        meter = self.meters[sender]
        size = HEADER_SIZE + len(payload)
        delay_ms, bandwidth = self.latency.link(sender, receiver)
        with self._lock:
            start = max(meter.clock, self._link_free[(sender, receiver)])
            tx = size / bandwidth if bandwidth else 0.0
            self._link_free[(sender, receiver)] = start + tx
            env = Envelope(self.session_id, sender, receiver, MsgType(tag), bytes(payload),
                           meter.clock, start + tx + delay_ms / 1000.0)
            if self.record:
                self.transcript.append(env)
        meter.on_send(size)
        self._queues[(sender, receiver)].put(env)

    def _recv(self, receiver: str, sender: str) -> Envelope:
        if (sender, receiver) not in self._queues:
            raise TransportError(f"no link {sender} -> {receiver}", party=sender)
        try:
            env = self._queues[(sender, receiver)].get(timeout=RECV_TIMEOUT_S)
        except queue.Empty:
            raise TransportError(f"timeout waiting for {sender}", party=sender) from None
        if env is _CLOSED:
            self._queues[(sender, receiver)].put(_CLOSED)
            raise TransportError(f"party {sender} dropped out", party=sender)
        meter = self.meters[receiver]
        meter.clock = max(meter.clock, env.deliver_at)
        meter.on_recv(env.size)
        return env

    def close(self, name: str) -> None:
        with self._lock:
            if name in self._closed:
                return
            self._closed.add(name)
        for other in self.parties:
            if other != name:
                self._queues[(name, other)].put(_CLOSED)

    def reset_clocks(self) -> None:
        for m in self.meters.values():
            m.clock = 0.0
        for k in self._link_free:
            self._link_free[k] = 0.0

    @property
    def elapsed(self) -> float:
        return max(m.clock for m in self.meters.values())

    @property
    def rounds(self) -> int:
        return max(m.rounds for m in self.meters.values())

    @property
    def bytes_total(self) -> int:
        return sum(m.bytes_sent for m in self.meters.values())

    def summary(self) -> dict:
        return {"rounds": self.rounds, "bytes": self.bytes_total, "elapsed_s": self.elapsed,
                "messages": sum(m.messages_sent for m in self.meters.values())}


def run_parties(net: SimNetwork, programs: dict) -> dict:
    """Run one callable per party, each in its own thread, and collect results.

    ``programs`` maps party name to ``fn(channel)``. A party whose program
    raises has its channel closed, so peers blocked on it fail fast with a
    :class:`TransportError`. The root-cause exception is re-raised.
    """
    results, errors = {}, {}

    def runner(name, fn):
        chan = net.channel(name)
        try:
            results[name] = fn(chan)
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors[name] = exc
            net.close(name)

    threads = [threading.Thread(target=runner, args=(n, f), name=f"party-{n}", daemon=True)
               for n, f in programs.items()]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        primary = [e for e in errors.values() if not isinstance(e, TransportError)]
        raise (primary or list(errors.values()))[0]
    return results


class SocketChannel:
    """A two-party channel over a connected TCP socket.

    Only ``peer`` may be addressed. The meter counts messages, bytes and
    rounds exactly as the simulator does; the clock stays at zero.
    """

    def __init__(self, sock: socket.socket, name: str, peer: str, session_id: bytes | None = None):
        self.sock = sock
        self.name = name
        self.peer = peer
        self.session_id = session_id or bytes(16)
        self.meter = Meter()
        self.peer_session_id: bytes | None = None
        self._buf = sock.makefile("rb")

    def send(self, to: str, tag: MsgType, payload: bytes) -> None:
        if to != self.peer:
            raise TransportError(f"socket channel is connected to {self.peer}, not {to}", party=to)
        frame = encode_frame(tag, self.session_id, payload)
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"send to {to} failed: {exc}", party=to) from exc
        self.meter.on_send(len(frame))

    def recv_frame(self) -> tuple[MsgType, bytes]:
        hdr = self._read_exact(4)
        (length,) = struct.unpack("<I", hdr)
        if length < HEADER_SIZE - 4 or length > MAX_FRAME:
            raise FrameError(f"implausible frame length {length}", party=self.peer)
        body = self._read_exact(length)
        tag, version, sid, payload = decode_frame(hdr + body)
        if version != PROTOCOL_VERSION:
            raise VersionMismatch(f"peer speaks protocol v{version}, expected v{PROTOCOL_VERSION}",
                                  party=self.peer)
        if tag == MsgType.HELLO:
            self.peer_session_id = sid
        elif sid != self.session_id:
            raise FrameError("session id mismatch", party=self.peer)
        self.meter.on_recv(len(hdr) + length)
        return tag, payload

    def recv(self, frm: str, expect: MsgType | None = None) -> bytes:
        if frm != self.peer:
            raise TransportError(f"socket channel is connected to {self.peer}, not {frm}", party=frm)
        tag, payload = self.recv_frame()
        if tag == MsgType.ERROR:
            raise remote_error(payload, frm)
        if expect is not None and tag != expect:
            raise FrameError(f"expected {expect.name}, got {tag.name}", party=frm)
        return payload

    def _read_exact(self, n: int) -> bytes:
        data = self._buf.read(n)
        if data is None or len(data) < n:
            raise TransportError(f"connection to {self.peer} closed", party=self.peer)
        return data

    def close(self) -> None:
        try:
            self._buf.close()
            self.sock.close()
        except OSError:
            pass
