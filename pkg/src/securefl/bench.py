"""Latency benchmark of encrypted inference on the simulated network.

``fss`` is the implemented protocol: one online round per comparison layer.
``baseline`` stands in for a SecureNN-class protocol: the same linear layers,
but each comparison round is followed by ``rounds_per_comparison - 1`` extra
exchanges of equal size (default 8 rounds per comparison). It is a
round-complexity model, not an implementation of that protocol.
"""

from __future__ import annotations

import time

import numpy as np

from . import nn
from .data import derive_rng
from .inference import prepare_session, secure_forward
from .transport import HEADER_SIZE, LatencyModel

DEFAULT_BANDWIDTH = 12.5e6  # bytes per second (100 Mbit/s)
BASELINE_ROUNDS_PER_COMPARISON = 8


def _tensor_bytes(shape) -> int:
    return 6 + 4 * len(shape) + 8 * int(np.prod(shape))


def exchange_schedule(arch: nn.Architecture, rounds_per_comparison: int = 1) -> list[tuple[str, int]]:
    """(layer, frame bytes) for every sequential exchange of one inference.

    Both parties send frames of identical size in each exchange. The final
    entry is the one-way result delivery.
    """
    legs = []
    shape = (1,) + tuple(arch.input_shape)
    for layer in arch.layers():
        kind = layer[0]
        if kind == "conv":
            _, name, cin, cout = layer
            legs.append((name, HEADER_SIZE + _tensor_bytes(shape) + _tensor_bytes((cout, cin, 3, 3))))
            shape = (1, cout) + shape[2:]
        elif kind == "linear":
            _, name, fin, fout = layer
            legs.append((name, HEADER_SIZE + _tensor_bytes((fout, fin)) + _tensor_bytes((fin, 1))))
            shape = (fout, 1)
        elif kind == "relu":
            size = HEADER_SIZE + _tensor_bytes((int(np.prod(shape)),))
            legs += [("relu", size)] * rounds_per_comparison
        elif kind == "pool":
            shape = shape[:2] + (shape[2] // 2, shape[3] // 2)
        elif kind == "flatten":
            shape = (int(np.prod(shape)), 1)
    c = arch.num_classes
    if c > 1:
        level = c
        while level > 1:
            k = level // 2
            legs += [("argmax", HEADER_SIZE + _tensor_bytes((k,)))] * rounds_per_comparison
            level -= k
        legs += [("argmax", HEADER_SIZE + _tensor_bytes((c,)))] * rounds_per_comparison
    legs.append(("result", HEADER_SIZE + _tensor_bytes((c,))))
    return legs


def predicted_latency(arch: nn.Architecture, latency_ms: float, bandwidth: float | None = DEFAULT_BANDWIDTH,
                      rounds_per_comparison: int = 1) -> dict:
    """Closed-form online time: every exchange costs one delay plus its transfer time."""
    legs = exchange_schedule(arch, rounds_per_comparison)
    d = latency_ms / 1000.0
    transfer = sum(b / bandwidth for _, b in legs) if bandwidth else 0.0
    return {"elapsed_s": len(legs) * d + transfer, "rounds": len(legs) - 1,
            "latency_component_s": len(legs) * d, "transfer_component_s": transfer}


def benchmark_inference(latency_ms: float, protocol: str = "fss", repeats: int = 1,
                        params: nn.ModelParams | None = None, bandwidth: float | None = DEFAULT_BANDWIDTH,
                        rounds_per_comparison: int = BASELINE_ROUNDS_PER_COMPARISON, seed: int = 0) -> dict:
    """Run ``repeats`` encrypted inferences under a latency model and report meters.

    Returns elapsed virtual seconds, online rounds, bytes, per-layer times and
    the closed-form prediction from :func:`predicted_latency`.
    """
    if protocol not in ("fss", "baseline"):
        raise ValueError(f"unknown protocol {protocol!r}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    params = params or nn.init_params(nn.SMALLCNN_16, derive_rng(seed, "init"))
    arch = params.arch
    k = 1 if protocol == "fss" else rounds_per_comparison
    pair = prepare_session(params, seed, n_inferences=0)
    latency = LatencyModel(latency_ms, bandwidth)
    rng = derive_rng(seed, "bench-inputs")
    runs, wall = [], 0.0
    for i in range(repeats):
        pair.replenish(1)
        x = rng.standard_normal(arch.input_shape)
        t0 = time.perf_counter()
        pred = secure_forward(pair, x, latency, derive_rng(seed, "input-share", i), extra_comparison_rounds=k - 1,
                              record=False)
        wall += time.perf_counter() - t0
        runs.append(pred)
    net = runs[-1].network
    per_layer, prev = [], 0.0
    relu_rounds = []
    prev_rounds = 0
    for entry in runs[-1].trace:
        per_layer.append({"layer": entry["layer"], "elapsed_s": entry["clock"] - prev,
                          "rounds": entry["rounds"] - prev_rounds})
        if entry["kind"] == "relu":
            relu_rounds.append(entry["rounds"] - prev_rounds)
        prev, prev_rounds = entry["clock"], entry["rounds"]
    elapsed = [r.network.elapsed for r in runs]
    return {
        "protocol": protocol,
        "latency_ms": latency_ms,
        "bandwidth": bandwidth,
        "rounds_per_comparison": k,
        "repeats": repeats,
        "elapsed_s": float(np.mean(elapsed)),
        "elapsed_all_s": elapsed,
        "rounds": net.rounds,
        "bytes": net.bytes_total,
        "relu_layer_rounds": relu_rounds,
        "per_layer": per_layer,
        "predicted": predicted_latency(arch, latency_ms, bandwidth, k),
        "wall_s": wall,
        "arch": arch.tag,
    }


def compare_protocols(latencies=(10.0, 100.0), repeats: int = 1, **kwargs) -> dict:
    """Benchmark both protocols at each latency and report the relative reduction."""
    out = {}
    for lat in latencies:
        f = benchmark_inference(lat, "fss", repeats, **kwargs)
        b = benchmark_inference(lat, "baseline", repeats, **kwargs)
        out[str(lat)] = {"fss": f, "baseline": b, "reduction": 1.0 - f["elapsed_s"] / b["elapsed_s"]}
    return out
