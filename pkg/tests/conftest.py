import numpy as np
import pytest

from securefl import nn
from securefl.data import derive_rng, synthetic_images
from securefl.transport import SimNetwork, run_parties


def two_party(prog0, prog1, latency=None):
    """Run ``prog0(chan)`` as party ``p0`` and ``prog1(chan)`` as ``p1``; returns both results and the network."""
    net = SimNetwork(["p0", "p1"], latency)
    res = run_parties(net, {"p0": prog0, "p1": prog1})
    return res["p0"], res["p1"], net


@pytest.fixture(scope="session")
def small_cnn():
    return nn.init_params(nn.SMALLCNN_16, derive_rng(0, "init"))


@pytest.fixture(scope="session")
def synth_nodes():
    """Three nodes of 200 raw synthetic images each plus a 300-image test set."""
    nodes = [synthetic_images(200, derive_rng(0, "synthetic", k)) for k in range(3)]
    test = synthetic_images(300, derive_rng(0, "synthetic", "test"))
    return nodes, test


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def plaintext_windows(arrays, window=64):
    """Every word-aligned ``window``-byte slice of the given plaintext buffers.

    Runs of one repeated word (zero biases, blank borders) carry no
    information and are skipped.
    """
    out = set()
    for a in arrays:
        buf = a if isinstance(a, bytes) else np.ascontiguousarray(a).tobytes()
        for i in range(0, len(buf) - window + 1, 8):
            w = buf[i:i + window]
            if w != w[:8] * (window // 8):
                out.add(w)
    return out


def transcript_hits(windows, transcript, window=64):
    """Count payload slices (at any byte offset) that equal a plaintext window."""
    hits = 0
    for env in transcript:
        p = env.payload
        hits += sum(p[i:i + window] in windows for i in range(len(p) - window + 1))
    return hits


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
