"""Additive secret sharing over Z_{2^64}, dealer-supplied Beaver triples and
secure summation.

Protocol functions are written from one party's point of view and talk to
peers through a channel (see :mod:`securefl.transport`); the ``simulate_*``
helpers run every party of a protocol on a :class:`~securefl.transport.SimNetwork`.
"""

from __future__ import annotations

import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import DegenerateInputError, MaterialExhausted, ProtocolError, TransportError
from .ring import (FixedTensor, ShapeError, decode_fixed, deserialize_tensor, deserialize_tensors,
                   encode_fixed, random_ring, serialize_tensor, serialize_tensors)
from .transport import MsgType, SimNetwork, run_parties


@dataclass(frozen=True)
class AdditiveShare:
    party_id: int
    payload: FixedTensor
    session_id: bytes = bytes(16)
    n_parties: int = 2


def share(secret: FixedTensor, n: int, rng: np.random.Generator, session_id: bytes = bytes(16)) -> list[AdditiveShare]:
    """Split ``secret`` into ``n`` shares; the first ``n - 1`` are uniform."""
    if n < 2:
        raise ValueError(f"need at least 2 parties to share, got {n}")
    parts = [random_ring(rng, secret.shape) for _ in range(n - 1)]
    last = secret.data.copy()
    for p in parts:
        last -= p
    parts.append(last)
    return [AdditiveShare(i, FixedTensor(p, secret.frac_bits), session_id, n) for i, p in enumerate(parts)]


def reconstruct(shares) -> FixedTensor:
    shares = list(shares)
    if not shares:
        raise ProtocolError("no shares to reconstruct")
    n = shares[0].n_parties
    sid = shares[0].session_id
    if any(s.session_id != sid for s in shares):
        raise ProtocolError("shares from different sessions")
    ids = sorted(s.party_id for s in shares)
    if ids != list(range(n)):
        missing = sorted(set(range(n)) - set(ids))
        raise ProtocolError(f"incomplete share set, missing parties {missing}",
                            party=str(missing[0]) if missing else None)
    total = shares[0].payload
    for s in shares[1:]:
        total = total + s.payload
    return total


def encode_share(s: AdditiveShare) -> bytes:
    """Wire format: session id (16 bytes) | party id (u8) | FXT1 tensor."""
    return s.session_id + struct.pack("<B", s.party_id) + serialize_tensor(s.payload)


def decode_share(buf: bytes, n_parties: int = 2) -> AdditiveShare:
    if len(buf) < 17:
        raise ProtocolError("share message too short")
    t, _ = deserialize_tensor(buf, 17)
    return AdditiveShare(buf[16], t, bytes(buf[:16]), n_parties)


# -- Beaver triples --------------------------------------------------------

def _bilinear(op: str):
    if op == "mul":
        return lambda a, b: a * b
    if op == "matmul":
        return np.matmul
    if op.startswith("conv"):
        pad = int(op.split("pad=")[1]) if "pad=" in op else 1
        return lambda x, w: ops.conv2d(x, w, pad)
    raise ValueError(f"unknown bilinear op {op!r}")


@dataclass
class TripleShare:
    """One party's share of a Beaver triple ``c = op(a, b)``."""

    a: FixedTensor
    b: FixedTensor
    c: FixedTensor
    op: str
    consumed: bool = False

    @property
    def key(self):
        return (self.op, self.a.shape, self.b.shape)


class TripleStore:
    """A party's queue of unused triples, keyed by (op, shape of a, shape of b)."""

    def __init__(self):
        self._queues: dict = defaultdict(deque)

    def add(self, t: TripleShare) -> None:
        self._queues[t.key].append(t)

    def take(self, op: str, shape_a, shape_b) -> TripleShare:
        q = self._queues.get((op, tuple(shape_a), tuple(shape_b)))
        if not q:
            raise MaterialExhausted(f"no triple left for {op} {tuple(shape_a)} x {tuple(shape_b)}")
        return q.popleft()

    def count(self) -> int:
        return sum(len(q) for q in self._queues.values())


class Dealer:
    """Trusted preprocessing party generating correlated randomness from a seed."""

    def __init__(self, rng: np.random.Generator, frac_bits: int = 16):
        self.rng = rng
        self.frac_bits = frac_bits

    def triple(self, op: str, shape_a, shape_b) -> tuple[TripleShare, TripleShare]:
        f = self.frac_bits
        a = random_ring(self.rng, shape_a)
        b = random_ring(self.rng, shape_b)
        c = _bilinear(op)(a, b)
        a0, b0, c0 = random_ring(self.rng, a.shape), random_ring(self.rng, b.shape), random_ring(self.rng, c.shape)
        t0 = TripleShare(FixedTensor(a0, f), FixedTensor(b0, f), FixedTensor(c0, 2 * f), op)
        t1 = TripleShare(FixedTensor(a - a0, f), FixedTensor(b - b0, f), FixedTensor(c - c0, 2 * f), op)
        return t0, t1


def open_values(chan, peer: str, values: list[FixedTensor]) -> list[FixedTensor]:
    """Exchange shares of ``values`` with ``peer`` and return the opened sums (one round)."""
    chan.send(peer, MsgType.OPEN, serialize_tensors(values))
    theirs = deserialize_tensors(chan.recv(peer, MsgType.OPEN))
    if len(theirs) != len(values) or any(t.shape != v.shape for t, v in zip(theirs, values)):
        raise ProtocolError("peer opened values of a different shape", party=peer)
    return [FixedTensor(v.data + t.data, v.frac_bits) for v, t in zip(values, theirs)]


def beaver_mul(chan, peer: str, party: int, x: FixedTensor, y: FixedTensor, triple: TripleShare) -> FixedTensor:
    """Two-party product ``op(x, y)`` of shared operands; result at scale ``2**(2f)``.

    Only ``x - a`` and ``y - b`` are opened.
    """
    if triple.consumed:
        raise ProtocolError("Beaver triple already consumed")
    if x.shape != triple.a.shape or y.shape != triple.b.shape:
        raise ShapeError(f"triple shaped {triple.a.shape}, {triple.b.shape} cannot serve {x.shape}, {y.shape}")
    triple.consumed = True
    eps, delta = open_values(chan, peer, [x - triple.a, y - triple.b])
    op = _bilinear(triple.op)
    z = op(eps.data, triple.b.data) + op(triple.a.data, delta.data) + triple.c.data
    if party == 0:
        z = z + op(eps.data, delta.data)
    return FixedTensor(z, x.frac_bits + y.frac_bits)


# -- secure summation ---------------------------------------------------------

def secure_sum_node(chan, contribution: FixedTensor, nodes: list[str], aggregator: str,
                    rng: np.random.Generator, simulation: bool = False) -> FixedTensor | None:
    """One node's side of secure summation.

    The node splits its contribution into one share per node, sends each peer
    its share, adds up the shares it receives and forwards that partial sum
    to the aggregator. Returns the revealed total if this node is also the
    aggregator.
    """
    me = chan.name
    n = len(nodes)
    if n == 1:
        if not simulation:
            raise ValueError("single-party secure sum is only allowed in simulation mode")
        partial = contribution
    else:
        shares = share(contribution, n, rng, chan.session_id)
        for s, other in zip(shares, nodes):
            if other != me:
                chan.send(other, MsgType.SHARE, encode_share(s))
        partial = shares[nodes.index(me)].payload
        for other in nodes:
            if other == me:
                continue
            try:
                got = decode_share(chan.recv(other, MsgType.SHARE), n).payload
            except TransportError as exc:
                raise ProtocolError(f"aborting secure sum: node {other} dropped out", party=other) from exc
            if got.shape != partial.shape or got.frac_bits != partial.frac_bits:
                raise ProtocolError(f"node {other} sent a share of the wrong shape", party=other)
            partial = partial + got
    if aggregator == me:
        return _aggregate(chan, partial, nodes, me)
    chan.send(aggregator, MsgType.SHARE, serialize_tensor(partial))
    return None


def _aggregate(chan, own: FixedTensor | None, nodes: list[str], me: str) -> FixedTensor:
    total = own
    for other in nodes:
        if other == me:
            continue
        try:
            part, _ = deserialize_tensor(chan.recv(other, MsgType.SHARE))
        except TransportError as exc:
            raise ProtocolError(f"aborting secure sum: node {other} dropped out", party=other) from exc
        total = part if total is None else total + part
    return total


def secure_sum_aggregator(chan, nodes: list[str]) -> FixedTensor:
    """Aggregator side: receive one partial sum per node and add them."""
    return _aggregate(chan, None, nodes, chan.name)


def simulate_secure_sum(contributions: list[FixedTensor], rng: np.random.Generator, latency=None,
                        dropout: str | None = None, aggregator: str = "server",
                        net: SimNetwork | None = None) -> tuple[FixedTensor, SimNetwork]:
    """Run secure summation for ``len(contributions)`` nodes on a simulated network.

    ``dropout`` names a node that crashes before sending anything, which
    aborts the protocol with a :class:`ProtocolError` naming it.
    """
    if not contributions:
        raise DegenerateInputError("no contributions")
    shape, f = contributions[0].shape, contributions[0].frac_bits
    if any(c.shape != shape or c.frac_bits != f for c in contributions):
        raise ShapeError("contributions differ in shape or frac_bits")
    nodes = [f"node{i}" for i in range(len(contributions))]
    parties = nodes + ([aggregator] if aggregator not in nodes else [])
    net = net or SimNetwork(parties, latency)
    seeds = rng.integers(0, 2**63, size=len(nodes))
    programs = {}
    for name, c, s in zip(nodes, contributions, seeds):
        def prog(chan, c=c, s=s, name=name):
            if name == dropout:
                raise TransportError(f"{name} crashed", party=name)
            return secure_sum_node(chan, c, nodes, aggregator, np.random.default_rng(s), simulation=True)
        programs[name] = prog
    if aggregator not in nodes:
        programs[aggregator] = lambda chan: secure_sum_aggregator(chan, nodes)
    try:
        results = run_parties(net, programs)
    except TransportError as exc:
        raise ProtocolError(f"secure sum aborted: {exc}", party=exc.party) from exc
    return results[aggregator], net


@dataclass
class Moments:
    mean: np.ndarray
    std: np.ndarray
    count: float
    network: SimNetwork | None = field(default=None, repr=False)


def secure_moments(local_sums, local_sumsq, local_counts, rng: np.random.Generator, frac_bits: int = 16,
                   latency=None) -> Moments:
    """Pooled mean and standard deviation from per-node sums, sums of squares and counts.

    Each node's three statistics are encoded and securely summed; only the
    three aggregates are revealed, from which ``mean = S/N`` and
    ``std = sqrt(Q/N - mean**2)`` follow.
    """
    sums = [np.atleast_1d(np.asarray(s, dtype=np.float64)) for s in local_sums]
    sumsq = [np.atleast_1d(np.asarray(q, dtype=np.float64)) for q in local_sumsq]
    counts = [float(c) for c in local_counts]
    if not sums:
        raise DegenerateInputError("no nodes")
    contributions = [encode_fixed(np.concatenate([s, q, [c]]), frac_bits) for s, q, c in zip(sums, sumsq, counts)]
    if len(contributions) == 1:
        total, net = contributions[0], None
    else:
        total, net = simulate_secure_sum(contributions, rng, latency)
    agg = decode_fixed(total)
    k = sums[0].size
    n = agg[-1]
    if n <= 0:
        raise DegenerateInputError("total count is zero")
    mean = agg[:k] / n
    var = np.maximum(agg[k:2 * k] / n - mean**2, 0.0)
    return Moments(mean, np.sqrt(var), n, net)
