"""Two-party encrypted inference.

The data owner (party 0) and the model owner (party 1) hold additive shares
of the input image and of every model parameter. Linear layers are Beaver
products (convolutions through the ``conv`` bilinear op, i.e. im2col plus a
matrix product) followed by local truncation; ReLU and the final argmax use
the DCF masked-comparison gadgets. A third logical party, the dealer,
supplies all preprocessing material. At the end the model owner sends its
share of the one-hot label to the data owner, the only party that can
reconstruct it.

Online communication per image is one round per linear layer, one per ReLU
layer and ``ceil(log2 C) + 1`` for the argmax.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import fss, nn, ops
from .data import derive_rng
from .errors import FrameError, ProtocolError, error_payload
from .fss import MaskBatch, MaskStore, deal_masks, deserialize_key, serialize_key
from .ring import (FixedTensor, decode_fixed, deserialize_tensor, deserialize_tensors, encode_fixed,
                   serialize_tensor, serialize_tensors, truncate_share)
from .sharing import Dealer, TripleShare, TripleStore, beaver_mul, share
from .transport import MsgType, SimNetwork, SocketChannel, new_session_id, run_parties

log = logging.getLogger(__name__)

DATA, MODEL = "data", "model"
ROLES = {0: "data-owner", 1: "model-owner"}


@dataclass(frozen=True)
class GateCounts:
    """Preprocessing consumed by one inference of an architecture."""

    triples: tuple  # ((op, shape_a, shape_b), ...) in layer order
    relu_elements: tuple  # elements per ReLU layer
    argmax_comparisons: int
    online_rounds: int

    @property
    def comparisons(self) -> int:
        return sum(self.relu_elements) + self.argmax_comparisons


def gate_counts(arch: nn.Architecture) -> GateCounts:
    """Count multiplication and comparison gates layer by layer."""
    shape = (1,) + tuple(arch.input_shape)
    triples, relus = [], []
    for layer in arch.layers():
        kind = layer[0]
        if kind == "conv":
            _, _, cin, cout = layer
            triples.append(("conv:pad=1", shape, (cout, cin, 3, 3)))
            shape = (1, cout) + shape[2:]
        elif kind == "linear":
            _, _, fin, fout = layer
            triples.append(("matmul", (fout, fin), (fin, 1)))
            shape = (fout, 1)
        elif kind == "relu":
            relus.append(int(np.prod(shape)))
        elif kind == "pool":
            shape = shape[:2] + (shape[2] // 2, shape[3] // 2)
        elif kind == "flatten":
            shape = (int(np.prod(shape)), 1)
    c = arch.num_classes
    rounds = len(triples) + len(relus) + fss.argmax_rounds(c)
    return GateCounts(tuple(triples), tuple(relus), fss.argmax_comparisons(c), rounds)


@dataclass
class Material:
    """One party's preprocessing for a number of inferences."""

    triples: list = field(default_factory=list)
    masks: list = field(default_factory=list)

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<II", len(self.triples), len(self.masks))]
        for t in self.triples:
            op = t.op.encode()
            body = serialize_tensors([t.a, t.b, t.c])
            parts.append(struct.pack("<BI", len(op), len(body)) + op + body)
        for mb in self.masks:
            lo, hi = serialize_key(mb.key_lo), serialize_key(mb.key_hi)
            head = serialize_tensors([FixedTensor(mb.r, 0), FixedTensor(mb.correction, 0)])
            parts.append(struct.pack("<III", len(head), len(lo), len(hi)) + head + lo + hi)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> Material:
        try:
            nt, nm = struct.unpack_from("<II", buf, 0)
            pos, triples, masks = 8, [], []
            for _ in range(nt):
                lop, lbody = struct.unpack_from("<BI", buf, pos)
                pos += 5
                op = buf[pos:pos + lop].decode()
                a, b, c = deserialize_tensors(buf[pos + lop:pos + lop + lbody])
                pos += lop + lbody
                triples.append(TripleShare(a, b, c, op))
            for _ in range(nm):
                lh, llo, lhi = struct.unpack_from("<III", buf, pos)
                pos += 12
                r, corr = deserialize_tensors(buf[pos:pos + lh])
                pos += lh
                lo = deserialize_key(buf[pos:pos + llo])
                pos += llo
                hi = deserialize_key(buf[pos:pos + lhi])
                pos += lhi
                masks.append(MaskBatch(r.data, lo, hi, corr.data))
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise FrameError(f"malformed key block: {exc}") from exc
        if pos != len(buf):
            raise FrameError("trailing bytes in key block")
        return cls(triples, masks)


class InferenceDealer:
    """Trusted preprocessing party: Beaver triples and comparison masks per inference."""

    def __init__(self, arch: nn.Architecture, rng: np.random.Generator, frac_bits: int = 16):
        self.arch = arch
        self.counts = gate_counts(arch)
        self.rng = rng
        self._dealer = Dealer(rng, frac_bits)

    def material(self, n: int = 1) -> tuple[Material, Material]:
        m0, m1 = Material(), Material()
        for _ in range(n):
            for op, sa, sb in self.counts.triples:
                t0, t1 = self._dealer.triple(op, sa, sb)
                m0.triples.append(t0)
                m1.triples.append(t1)
            b0, b1 = deal_masks(self.rng, self.counts.comparisons)
            m0.masks.append(b0)
            m1.masks.append(b1)
        return m0, m1


@dataclass
class InferenceSession:
    session_id: bytes
    party: int
    arch: nn.Architecture
    model: dict  # parameter name -> FixedTensor share
    frac_bits: int = 16
    triples: TripleStore = field(default_factory=TripleStore)
    masks: MaskStore = field(default_factory=MaskStore)

    @property
    def role(self) -> str:
        return ROLES[self.party]

    def load(self, material: Material) -> None:
        for t in material.triples:
            self.triples.add(t)
        for mb in material.masks:
            self.masks.add(mb)

    def material_left(self) -> tuple[int, int]:
        return self.triples.count(), self.masks.available()


@dataclass
class SessionPair:
    data: InferenceSession
    model: InferenceSession
    dealer: InferenceDealer

    def replenish(self, n: int = 1) -> None:
        m0, m1 = self.dealer.material(n)
        self.data.load(m0)
        self.model.load(m1)


def share_model(params: nn.ModelParams, rng: np.random.Generator, frac_bits: int = 16,
                session_id: bytes = bytes(16)) -> tuple[dict, dict]:
    """Encode and split every parameter; returns (data-owner shares, model-owner shares)."""
    s0, s1 = {}, {}
    for name, value in params.items():
        a, b = share(encode_fixed(value, frac_bits), 2, rng, session_id)
        s0[name], s1[name] = a.payload, b.payload
    return s0, s1


def prepare_session(params: nn.ModelParams, seed: int = 0, n_inferences: int = 1, frac_bits: int = 16,
                    session_id: bytes | None = None) -> SessionPair:
    """Share the model and load dealer material for ``n_inferences`` images."""
    arch = params.arch
    if [n for n, _ in arch.param_shapes()] != params.names():
        raise ValueError("model does not match its architecture")
    sid = session_id or new_session_id(derive_rng(seed, "session-id"))
    s0, s1 = share_model(params, derive_rng(seed, "model-share"), frac_bits, sid)
    pair = SessionPair(InferenceSession(sid, 0, arch, s0, frac_bits), InferenceSession(sid, 1, arch, s1, frac_bits),
                       InferenceDealer(arch, derive_rng(seed, "dealer"), frac_bits))
    if n_inferences:
        pair.replenish(n_inferences)
    return pair


class PaddedChannel:
    """Channel wrapper that follows every comparison opening with ``extra`` dummy
    exchanges of the same size, emulating a protocol with more rounds per comparison."""

    def __init__(self, chan, extra: int, rng: np.random.Generator):
        self.chan = chan
        self.extra = extra
        self.rng = rng
        self.active = False

    def __getattr__(self, name):
        return getattr(self.chan, name)

    def send(self, to, tag, payload):
        self._last = len(payload)
        self.chan.send(to, tag, payload)

    def recv(self, frm, expect=None):
        got = self.chan.recv(frm, expect)
        if self.active and expect == MsgType.OPEN:
            for _ in range(self.extra):
                self.chan.send(frm, MsgType.OPEN, self.rng.bytes(self._last))
                self.chan.recv(frm, MsgType.OPEN)
        return got


def _add_bias(z: FixedTensor, bias: FixedTensor, shape) -> FixedTensor:
    return FixedTensor(z.data + bias.data.reshape(shape), z.frac_bits)


def forward_shares(chan, peer: str, session: InferenceSession, x: FixedTensor, trace: list | None = None) -> FixedTensor:
    """One party's side of the shared forward pass; returns its share of the logits."""
    party, f = session.party, session.frac_bits
    meter = getattr(chan, "meter", None)
    padded = isinstance(chan, PaddedChannel)
    h = x.reshape((1,) + x.shape) if x.data.ndim == 3 else x
    for layer in session.arch.layers():
        kind = layer[0]
        if kind in ("conv", "linear"):
            name = layer[1]
            w, b = session.model[f"{name}.weight"], session.model[f"{name}.bias"]
            if kind == "conv":
                op, lhs, rhs, bshape = "conv:pad=1", h, w, (1, -1, 1, 1)
            else:
                h = h.reshape(-1, 1) if h.data.ndim != 2 else h
                op, lhs, rhs, bshape = "matmul", w, h, (-1, 1)
            t = session.triples.take(op, lhs.shape, rhs.shape)
            z = truncate_share(beaver_mul(chan, peer, party, lhs, rhs, t), f, party)
            h = _add_bias(z, b, bshape)
        elif kind == "relu":
            if padded:
                chan.active = True
            h = fss.secure_relu(chan, peer, party, h, session.masks)
            if padded:
                chan.active = False
        elif kind == "pool":
            h = truncate_share(FixedTensor(ops.sum_pool2(h.data), f + 2), 2, party)
        elif kind == "flatten":
            h = h.reshape(-1, 1)
        if trace is not None and meter is not None:
            trace.append({"layer": layer[1] if len(layer) > 1 else kind, "kind": kind,
                          "clock": meter.clock, "rounds": meter.rounds})
    return h.reshape(-1)


def argmax_shares(chan, peer: str, session: InferenceSession, logits: FixedTensor,
                  trace: list | None = None) -> FixedTensor:
    padded = isinstance(chan, PaddedChannel)
    if padded:
        chan.active = True
    out = fss.secure_argmax(chan, peer, session.party, logits, session.masks)
    if padded:
        chan.active = False
    meter = getattr(chan, "meter", None)
    if trace is not None and meter is not None:
        trace.append({"layer": "argmax", "kind": "argmax", "clock": meter.clock, "rounds": meter.rounds})
    return out


@dataclass
class EncryptedPrediction:
    """Both shares of the one-hot prediction (and, for diagnostics, of the logits)."""

    data_share: FixedTensor
    model_share: FixedTensor
    logits_shares: tuple = field(default=(), repr=False)
    network: SimNetwork | None = field(default=None, repr=False)
    trace: list = field(default_factory=list, repr=False)

    def onehot(self) -> np.ndarray:
        return decode_fixed(self.data_share + self.model_share)

    @property
    def label(self) -> int:
        return int(np.argmax(self.onehot()))

    def logits(self) -> np.ndarray:
        a, b = self.logits_shares
        return decode_fixed(a + b)


def _result_payload(onehot: FixedTensor, logits: FixedTensor | None) -> bytes:
    return serialize_tensors([onehot] if logits is None else [onehot, logits])


def secure_forward(pair: SessionPair, image: np.ndarray, latency=None, rng: np.random.Generator | None = None,
                   extra_comparison_rounds: int = 0, record: bool = True) -> EncryptedPrediction:
    """Encrypted inference of one (C, H, W) image on a simulated two-party network.

    The input sharing message is exchanged first; clocks are then reset so
    the reported virtual time covers the online phase (shared forward pass
    plus result delivery). The dealer's material is assumed delivered in advance.
    """
    sess0, sess1 = pair.data, pair.model
    rng = rng or derive_rng(0, "input-share")
    x = encode_fixed(np.asarray(image, dtype=np.float64), sess0.frac_bits)
    if x.shape != tuple(sess0.arch.input_shape):
        raise ValueError(f"image shape {x.shape} does not match {sess0.arch.input_shape}")
    x0, x1 = share(x, 2, rng, sess0.session_id)
    net = SimNetwork([DATA, MODEL], latency, sess0.session_id, record)

    got = {}
    run_parties(net, {DATA: lambda ch: ch.send(MODEL, MsgType.SHARE, serialize_tensor(x1.payload)),
                      MODEL: lambda ch: got.setdefault("x1", deserialize_tensor(ch.recv(DATA, MsgType.SHARE))[0])})
    net.reset_clocks()
    trace = []
    pad_seed = int(rng.integers(0, 2**63))

    def wrap(ch, who):
        if extra_comparison_rounds:
            return PaddedChannel(ch, extra_comparison_rounds, derive_rng(pad_seed, who))
        return ch

    def data_owner(ch):
        ch = wrap(ch, DATA)
        logits = forward_shares(ch, MODEL, sess0, x0.payload, trace)
        onehot = argmax_shares(ch, MODEL, sess0, logits, trace)
        theirs = deserialize_tensors(ch.recv(MODEL, MsgType.RESULT))
        trace.append({"layer": "result", "kind": "result", "clock": ch.meter.clock, "rounds": ch.meter.rounds})
        return onehot, logits, theirs

    def model_owner(ch):
        ch = wrap(ch, MODEL)
        logits = forward_shares(ch, DATA, sess1, got["x1"])
        onehot = argmax_shares(ch, DATA, sess1, logits)
        ch.send(DATA, MsgType.RESULT, _result_payload(onehot, None))
        return logits

    res = run_parties(net, {DATA: data_owner, MODEL: model_owner})
    onehot0, logits0, (onehot1,) = res[DATA]
    return EncryptedPrediction(onehot0, onehot1, (logits0, res[MODEL]), net, trace)


def secure_predict(pair: SessionPair, images, latency=None, seed: int = 0, replenish: bool = True) -> np.ndarray:
    """Labels for a batch of images, processed sequentially with fresh material each."""
    labels = []
    for i, img in enumerate(images):
        if replenish and pair.data.triples.count() < len(pair.dealer.counts.triples):
            pair.replenish(1)
        labels.append(secure_forward(pair, img, latency, derive_rng(seed, "input-share", i)).label)
    return np.asarray(labels, dtype=np.int64)


# -- socket service -----------------------------------------------------------

def _hello(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True).encode()


def _send_error(chan, peer: str, exc: BaseException) -> None:
    try:
        chan.send(peer, MsgType.ERROR, error_payload(exc))
    except Exception:  # noqa: BLE001 - the connection may already be gone
        pass


def serve_session(chan: SocketChannel, params: nn.ModelParams, seed: int = 0, frac_bits: int = 16,
                  reveal_logits_allowed: bool = False) -> int:
    """Model-owner side of one client connection; returns the number of images served.

    Protocol: client HELLO (image count, shape) -> server HELLO (architecture);
    server sends the client's model shares (SHARE) and, per image, the
    client's dealer material (KEYBLOCK); the client sends its input share
    (SHARE); the shared forward pass exchanges OPEN frames; the server
    returns its prediction share (RESULT). Any failure is reported with an
    ERROR frame and ends the session.
    """
    try:
        tag, payload = chan.recv_frame()
        if tag != MsgType.HELLO:
            raise FrameError(f"expected HELLO, got {tag.name}", party=DATA)
        chan.session_id = chan.peer_session_id
        try:
            hello = json.loads(payload)
            n = int(hello["images"])
            shape = tuple(hello.get("shape", params.arch.input_shape))
        except (ValueError, KeyError, TypeError) as exc:
            raise FrameError(f"malformed HELLO: {exc}", party=DATA) from exc
        if shape != tuple(params.arch.input_shape):
            raise ProtocolError(f"input shape {shape} does not match model input {params.arch.input_shape}")
        if n < 0:
            raise FrameError("negative image count", party=DATA)
        want_logits = bool(hello.get("logits")) and reveal_logits_allowed
        chan.send(DATA, MsgType.HELLO, _hello({"arch": params.arch.tag, "frac_bits": frac_bits,
                                               "images": n, "logits": want_logits}))
        if n == 0:
            chan.send(DATA, MsgType.RESULT, b"")
            return 0
        sid = chan.session_id
        s0, s1 = share_model(params, derive_rng(seed, "model-share", sid.hex()), frac_bits, sid)
        chan.send(DATA, MsgType.SHARE, serialize_tensors([s0[k] for k in params.names()]))
        session = InferenceSession(sid, 1, params.arch, s1, frac_bits)
        dealer = InferenceDealer(params.arch, derive_rng(seed, "dealer", sid.hex()), frac_bits)
        for _ in range(n):
            m0, m1 = dealer.material(1)
            session.load(m1)
            chan.send(DATA, MsgType.KEYBLOCK, m0.to_bytes())
            x1, _ = _safe_tensor(chan.recv(DATA, MsgType.SHARE))
            if x1.shape != tuple(params.arch.input_shape):
                raise FrameError(f"input share has shape {x1.shape}", party=DATA)
            logits = forward_shares(chan, DATA, session, x1)
            onehot = argmax_shares(chan, DATA, session, logits)
            chan.send(DATA, MsgType.RESULT, _result_payload(onehot, logits if want_logits else None))
        return n
    except ProtocolError as exc:
        log.warning("session aborted: %s", exc)
        _send_error(chan, DATA, exc)
        raise
    except Exception as exc:
        log.exception("session failed")
        _send_error(chan, DATA, ProtocolError(f"internal error: {exc}"))
        raise


def _safe_tensor(buf: bytes):
    try:
        return deserialize_tensor(buf)
    except (ValueError, struct.error) as exc:
        raise FrameError(f"malformed tensor: {exc}", party=DATA) from exc


class InferenceServer(socketserver.ThreadingTCPServer):
    """Threaded TCP service; sessions share only the read-only model."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, params: nn.ModelParams, seed: int = 0, frac_bits: int = 16,
                 reveal_logits_allowed: bool = False):
        self.params = params
        self.seed = seed
        self.frac_bits = frac_bits
        self.reveal_logits_allowed = reveal_logits_allowed
        self.sessions_served = 0
        self.errors: list = []
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv = self.server
        chan = SocketChannel(self.request, MODEL, DATA)
        try:
            serve_session(chan, srv.params, srv.seed, srv.frac_bits, srv.reveal_logits_allowed)
            srv.sessions_served += 1
        except Exception as exc:  # noqa: BLE001 - reported to the client already
            srv.errors.append(exc)
        finally:
            chan.close()


def start_server(params: nn.ModelParams, host: str = "127.0.0.1", port: int = 0, seed: int = 0,
                 frac_bits: int = 16, reveal_logits_allowed: bool = False) -> InferenceServer:
    """Start serving in a background thread; call ``shutdown()`` then ``server_close()`` to stop."""
    srv = InferenceServer((host, port), params, seed, frac_bits, reveal_logits_allowed)
    threading.Thread(target=srv.serve_forever, name="inference-server", daemon=True).start()
    return srv


def request_inference(host: str, port: int, images, seed: int | None = None, logits: bool = False,
                      timeout: float = 300.0):
    """Data-owner client: obtain labels for ``images`` (N, C, H, W) without revealing them.

    Returns an int array of labels, or ``(labels, probabilities)`` when
    ``logits`` is set and the server permits revealing logits.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    rng = derive_rng(seed, "client") if seed is not None else np.random.default_rng()
    sid = new_session_id(rng)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        chan = SocketChannel(sock, DATA, MODEL, sid)
        try:
            chan.send(MODEL, MsgType.HELLO, _hello({"images": len(images), "shape": list(images.shape[1:]),
                                                    "logits": logits}))
            hello = json.loads(chan.recv(MODEL, MsgType.HELLO))
            arch = nn.Architecture.from_tag(hello["arch"])
            f = int(hello["frac_bits"])
            if len(images) == 0:
                chan.recv(MODEL, MsgType.RESULT)
                empty = np.zeros(0, dtype=np.int64)
                return (empty, np.zeros((0, arch.num_classes))) if logits else empty
            tensors = deserialize_tensors(chan.recv(MODEL, MsgType.SHARE))
            names = [n for n, _ in arch.param_shapes()]
            session = InferenceSession(sid, 0, arch, dict(zip(names, tensors)), f)
            labels, probs = [], []
            for img in images:
                session.load(Material.from_bytes(chan.recv(MODEL, MsgType.KEYBLOCK)))
                x0, x1 = share(encode_fixed(img, f), 2, rng, sid)
                chan.send(MODEL, MsgType.SHARE, serialize_tensor(x1.payload))
                lg = forward_shares(chan, MODEL, session, x0.payload)
                onehot = argmax_shares(chan, MODEL, session, lg)
                theirs = deserialize_tensors(chan.recv(MODEL, MsgType.RESULT))
                labels.append(int(np.argmax(decode_fixed(onehot + theirs[0]))))
                if len(theirs) > 1:
                    probs.append(nn.softmax(decode_fixed(lg + theirs[1])[None])[0])
        finally:
            chan.close()
    labels = np.asarray(labels, dtype=np.int64)
    if logits:
        return labels, np.asarray(probs) if probs else None
    return labels
