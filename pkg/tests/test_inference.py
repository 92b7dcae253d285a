import json
import socket

import numpy as np
import pytest

from securefl import inference as inf
from securefl import nn
from securefl.data import derive_rng
from securefl.errors import FrameError, MaterialExhausted, ProtocolError
from securefl.ring import decode_fixed, encode_fixed
from securefl.transport import MsgType, SocketChannel, encode_frame

F = 2.0**-16


def test_smallcnn_gate_counts():
    g = inf.gate_counts(nn.SMALLCNN_16)
    assert g.triples == (("conv:pad=1", (1, 1, 16, 16), (8, 1, 3, 3)),
                         ("conv:pad=1", (1, 8, 8, 8), (16, 8, 3, 3)),
                         ("matmul", (32, 256), (256, 1)),
                         ("matmul", (3, 32), (32, 1)))
    assert g.relu_elements == (8 * 16 * 16, 16 * 8 * 8, 32)
    assert g.argmax_comparisons == 2 + 3
    assert g.comparisons == 3109
    assert g.online_rounds == 4 + 3 + 3


def test_session_consumes_exactly_the_gate_count(small_cnn):
    pair = inf.prepare_session(small_cnn, seed=1, n_inferences=1)
    assert pair.data.material_left() == (4, 3109) == pair.model.material_left()
    pred = inf.secure_forward(pair, np.zeros((1, 16, 16)))
    assert pair.data.material_left() == (0, 0) == pair.model.material_left()
    assert pred.network.rounds == inf.gate_counts(small_cnn.arch).online_rounds


def test_shared_model_reconstructs_encoding(small_cnn):
    pair = inf.prepare_session(small_cnn, seed=0, n_inferences=0)
    for name, value in small_cnn.items():
        assert pair.data.model[name] + pair.model.model[name] == encode_fixed(value)
        assert pair.data.model[name] != encode_fixed(value)


def _words(material):
    """Every random 64-bit word of a party's material (triple shares, masks, DCF seeds and corrections)."""
    arrays = [a for t in material.triples for a in (t.a.data, t.b.data, t.c.data)]
    for mb in material.masks:
        arrays += [mb.r, mb.correction]
        for k in (mb.key_lo, mb.key_hi):
            arrays += [k.seed, k.cw_seed, k.cw_value, k.cw_final]
    return set(np.concatenate([a.ravel() for a in arrays]).tolist())


def test_sessions_from_different_seeds_share_no_material(small_cnn):
    a = inf.InferenceDealer(small_cnn.arch, derive_rng(1, "dealer")).material(1)
    b = inf.InferenceDealer(small_cnn.arch, derive_rng(2, "dealer")).material(1)
    wa, wb = _words(a[0]) | _words(a[1]), _words(b[0]) | _words(b[1])
    assert len(wa) > 10**5 and not (wa & wb)


def test_material_round_trip_and_malformed(small_cnn):
    arch = nn.Architecture.from_tag("mlp:1x4x4:4:3")
    m0, _ = inf.InferenceDealer(arch, np.random.default_rng(0)).material(2)
    buf = m0.to_bytes()
    back = inf.Material.from_bytes(buf)
    assert back.to_bytes() == buf and len(back.triples) == 4 and len(back.masks) == 2
    with pytest.raises(FrameError):
        inf.Material.from_bytes(buf[:-5])
    with pytest.raises(FrameError):
        inf.Material.from_bytes(buf + b"\0")


def test_logits_and_label_match_plaintext(small_cnn):
    rng = np.random.default_rng(0)
    pair = inf.prepare_session(small_cnn, seed=3, n_inferences=0)
    for i in range(4):
        pair.replenish(1)
        x = rng.standard_normal((1, 16, 16))
        pred = inf.secure_forward(pair, x, rng=derive_rng(3, "input-share", i))
        want = nn.forward(small_cnn, decode_fixed(encode_fixed(x))[None])[0]
        assert np.max(np.abs(pred.logits() - want)) <= 10 * F
        assert pred.label == int(np.argmax(want))
        assert sorted(pred.onehot().tolist()) == [0.0, 0.0, 1.0]


def test_mlp_inference(rng):
    arch = nn.Architecture.from_tag("mlp:1x8x8:16:4")
    params = nn.init_params(arch, rng)
    x = rng.standard_normal((5, 1, 8, 8))
    pair = inf.prepare_session(params, seed=0, n_inferences=0)
    labels = inf.secure_predict(pair, x, seed=0)
    assert labels.tolist() == nn.predict(params, x).tolist()


def test_zero_input_zero_bias_picks_class_zero(small_cnn):
    pair = inf.prepare_session(small_cnn, seed=0)
    assert inf.secure_forward(pair, np.zeros((1, 16, 16))).label == 0


def test_transcript_never_carries_plain_input(small_cnn):
    pair = inf.prepare_session(small_cnn, seed=0)
    x = np.random.default_rng(5).uniform(-1, 1, (1, 16, 16))
    pred = inf.secure_forward(pair, x)
    plain = encode_fixed(x).data.tobytes()
    for env in pred.network.transcript:
        for off in range(0, len(plain) - 64, 64):
            assert plain[off:off + 64] not in env.payload


def test_material_exhaustion(small_cnn):
    pair = inf.prepare_session(small_cnn, seed=0, n_inferences=0)
    with pytest.raises(MaterialExhausted):
        inf.secure_forward(pair, np.zeros((1, 16, 16)))


def test_wrong_image_shape(small_cnn):
    pair = inf.prepare_session(small_cnn, seed=0)
    with pytest.raises(ValueError):
        inf.secure_forward(pair, np.zeros((1, 8, 8)))


@pytest.fixture(scope="module")
def server():
    params = nn.init_params(nn.Architecture.from_tag("smallcnn:1x8x8:3"), derive_rng(0, "server-model"))
    srv = inf.start_server(params, port=0, seed=11, reveal_logits_allowed=True)
    yield srv
    srv.shutdown()
    srv.server_close()


def test_socket_loopback_matches_plaintext(server):
    x = np.random.default_rng(2).standard_normal((3, 1, 8, 8))
    labels, probs = inf.request_inference("127.0.0.1", server.port, x, seed=1, logits=True)
    assert labels.tolist() == nn.predict(server.params, x).tolist()
    assert np.allclose(probs, nn.predict_proba(server.params, x), atol=1e-3)


def test_socket_empty_batch(server):
    before = server.sessions_served
    assert inf.request_inference("127.0.0.1", server.port, np.zeros((0, 1, 8, 8))).tolist() == []
    assert server.sessions_served == before + 1


def test_socket_shape_mismatch_is_typed_error(server):
    with pytest.raises(ProtocolError, match="does not match"):
        inf.request_inference("127.0.0.1", server.port, np.zeros((1, 1, 16, 16)))


def _raw_client(server, sid=b"c" * 16):
    sock = socket.create_connection(("127.0.0.1", server.port), timeout=30)
    return SocketChannel(sock, inf.DATA, inf.MODEL, sid)


def test_corrupted_frame_aborts_without_result(server):
    chan = _raw_client(server)
    chan.send(inf.MODEL, MsgType.HELLO, json.dumps({"images": 1, "shape": [1, 8, 8]}).encode())
    chan.recv(inf.MODEL, MsgType.HELLO)
    chan.recv(inf.MODEL, MsgType.SHARE)
    chan.recv(inf.MODEL, MsgType.KEYBLOCK)
    chan.send(inf.MODEL, MsgType.SHARE, b"FXT1 this is not a tensor")
    with pytest.raises(FrameError, match="malformed tensor"):
        chan.recv(inf.MODEL, MsgType.OPEN)
    with pytest.raises(Exception):
        chan.recv(inf.MODEL)
    chan.close()


def test_version_mismatch_reported(server):
    chan = _raw_client(server, sid=bytes(16))
    chan.sock.sendall(encode_frame(MsgType.HELLO, bytes(16), b"{}", version=9))
    with pytest.raises(ProtocolError) as info:
        chan.recv(inf.MODEL)
    assert type(info.value).__name__ == "VersionMismatch"
    chan.close()


def test_malformed_hello(server):
    chan = _raw_client(server)
    chan.send(inf.MODEL, MsgType.HELLO, b"not json")
    with pytest.raises(FrameError, match="HELLO"):
        chan.recv(inf.MODEL)
    chan.close()
