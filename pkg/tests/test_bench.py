import numpy as np
import pytest

from securefl import bench, nn
from securefl.data import derive_rng


@pytest.fixture(scope="module")
def runs():
    return bench.compare_protocols((10.0, 100.0), repeats=2)


def test_fss_spends_one_round_per_relu_layer(runs):
    for lat in ("10.0", "100.0"):
        assert runs[lat]["fss"]["relu_layer_rounds"] == [1, 1, 1]
        assert runs[lat]["baseline"]["relu_layer_rounds"] == [8, 8, 8]


def test_measured_matches_closed_form(runs):
    for lat in ("10.0", "100.0"):
        for proto in ("fss", "baseline"):
            r = runs[lat][proto]
            assert r["elapsed_s"] == pytest.approx(r["predicted"]["elapsed_s"], rel=0.01)
            assert r["rounds"] == r["predicted"]["rounds"]


def test_latency_component_scales_linearly(runs):
    a, b = runs["10.0"]["fss"]["predicted"], runs["100.0"]["fss"]["predicted"]
    assert b["latency_component_s"] / a["latency_component_s"] == pytest.approx(10.0)
    assert a["transfer_component_s"] == pytest.approx(b["transfer_component_s"])
    assert runs["10.0"]["fss"]["bytes"] == runs["100.0"]["fss"]["bytes"]


def test_fss_beats_baseline_more_at_high_latency(runs):
    r10, r100 = runs["10.0"]["reduction"], runs["100.0"]["reduction"]
    assert 0 < r10 < r100 < 1
    for lat in ("10.0", "100.0"):
        assert runs[lat]["fss"]["elapsed_s"] < runs[lat]["baseline"]["elapsed_s"]


def test_zero_latency_unlimited_bandwidth_is_free():
    r = bench.benchmark_inference(0.0, "fss", bandwidth=None)
    assert r["elapsed_s"] == 0.0 and r["predicted"]["elapsed_s"] == 0.0
    assert r["rounds"] == 10


def test_schedule_round_count_matches_gate_model():
    from securefl.inference import gate_counts
    legs = bench.exchange_schedule(nn.SMALLCNN_16)
    assert len(legs) - 1 == gate_counts(nn.SMALLCNN_16).online_rounds
    assert legs[-1][0] == "result"
    k = 8
    assert len(bench.exchange_schedule(nn.SMALLCNN_16, k)) - 1 == 4 + k * 3 + k * 3


def test_deterministic_and_repeats_agree():
    a = bench.benchmark_inference(10.0, "fss", repeats=2, seed=3)
    b = bench.benchmark_inference(10.0, "fss", repeats=2, seed=3)
    assert a["elapsed_all_s"] == b["elapsed_all_s"] and a["bytes"] == b["bytes"]
    assert a["elapsed_all_s"][0] == a["elapsed_all_s"][1]


def test_other_architecture():
    params = nn.init_params(nn.Architecture.from_tag("mlp:1x8x8:16:4"), derive_rng(0, "init"))
    r = bench.benchmark_inference(10.0, "fss", params=params)
    assert r["relu_layer_rounds"] == [1] and r["arch"] == "mlp:1x8x8:16:4"
    assert r["elapsed_s"] == pytest.approx(r["predicted"]["elapsed_s"], rel=0.01)


def test_bad_arguments():
    with pytest.raises(ValueError):
        bench.benchmark_inference(10.0, "secureml")
    with pytest.raises(ValueError):
        bench.benchmark_inference(10.0, repeats=0)
    with pytest.raises(ValueError):
        bench.benchmark_inference(-1.0)
