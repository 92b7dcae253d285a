import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from statsmodels.stats.contingency_tables import mcnemar as sm_mcnemar

from securefl import metrics
from securefl.errors import DegenerateInputError

import oracles

labels = st.lists(st.integers(0, 3), min_size=2, max_size=60)


def test_mcc_fixed_confusion_matrix():
    cm = [[5, 1, 0], [2, 6, 1], [0, 2, 4]]
    want = oracles.mcc_gorodkin(cm)
    assert metrics.mcc_from_confusion(np.array(cm)) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(162 / np.sqrt(286 * 288), abs=1e-12)


def test_mcc_perfect_and_constant():
    y = np.array([0, 1, 2] * 10)
    assert metrics.mcc(y, y) == 1.0
    assert metrics.mcc(y, np.zeros_like(y), 3) == 0.0
    rep = metrics.metrics_report(y, np.zeros_like(y), num_classes=3)
    assert rep.accuracy == pytest.approx(1 / 3) and rep.mcc == 0.0


@given(st.lists(st.lists(st.integers(0, 30), min_size=3, max_size=3), min_size=3, max_size=3))
@settings(max_examples=100)
def test_mcc_matches_oracle(cm):
    assert metrics.mcc_from_confusion(np.array(cm)) == pytest.approx(oracles.mcc_gorodkin(cm), abs=1e-9)


def test_binary_mcc_equals_phi():
    tp, fn, fp, tn = 20, 5, 3, 12
    phi = (tp * tn - fp * fn) / np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    assert metrics.mcc_from_confusion(np.array([[tn, fp], [fn, tp]])) == pytest.approx(phi, abs=1e-12)


def test_kappa_examples():
    assert metrics.cohens_kappa([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx(0.5)
    a = [0, 1, 2, 2, 1]
    assert metrics.cohens_kappa(a, a) == 1.0
    assert metrics.cohens_kappa([1, 1, 1], [1, 1, 1]) == 1.0
    assert metrics.cohens_kappa([0, 0, 0], [0, 0, 1]) == pytest.approx(0.0)
    with pytest.raises(DegenerateInputError):
        metrics.cohens_kappa([], [])
    with pytest.raises(ValueError):
        metrics.cohens_kappa([0], [0, 1])


@given(labels, st.integers(0, 2**32 - 1))
@settings(max_examples=100)
def test_kappa_matches_oracle_and_is_symmetric(a, seed):
    b = np.random.default_rng(seed).integers(0, 4, size=len(a)).tolist()
    k = metrics.cohens_kappa(a, b)
    assert k == pytest.approx(oracles.kappa(a, b), abs=1e-9)
    assert k == pytest.approx(metrics.cohens_kappa(b, a), abs=1e-12)


def test_mcnemar_examples():
    truth = np.zeros(12, dtype=int)
    a = np.array([0] * 10 + [1] * 2)
    b = np.array([1] * 10 + [0] * 2)
    stat, p = metrics.mcnemar_test(a, b, truth)
    assert stat == pytest.approx(49 / 12)
    ref = sm_mcnemar([[0, 10], [2, 0]], exact=False, correction=True)
    assert stat == pytest.approx(ref.statistic) and p == pytest.approx(ref.pvalue)
    assert metrics.mcnemar_test(b, a, truth)[0] == pytest.approx(stat)
    assert metrics.mcnemar_test(a, a, truth) == (0.0, 1.0)


@given(labels, st.integers(0, 2**32 - 1))
@settings(max_examples=100)
def test_mcnemar_matches_oracle(truth, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 4, size=len(truth)).tolist()
    b = rng.integers(0, 4, size=len(truth)).tolist()
    assert metrics.mcnemar_test(a, b, truth)[0] == pytest.approx(oracles.mcnemar(a, b, truth), abs=1e-9)


def test_auc_perfect_and_ties():
    y = np.array([0, 1, 2, 0, 1, 2])
    assert metrics.roc_auc_weighted(y, np.eye(3)[y]) == 1.0
    assert metrics.binary_auc([0.5, 0.5, 0.5], [True, False, True]) == 0.5
    assert np.isnan(metrics.binary_auc([0.1, 0.2], [True, True]))


@given(st.integers(0, 2**32 - 1), st.integers(4, 40))
@settings(max_examples=100)
def test_weighted_auc_matches_pairwise_oracle(seed, n):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 3, size=n)
    truth[:3] = [0, 1, 2]
    scores = np.round(rng.uniform(size=(n, 3)), 1)
    assert metrics.roc_auc_weighted(truth, scores) == pytest.approx(
        oracles.auc_weighted(truth.tolist(), scores.tolist()), abs=1e-9)


def test_report_fields_and_empty():
    y = np.array([0, 0, 1, 1, 2, 2])
    p = np.array([0, 1, 1, 1, 2, 0])
    rep = metrics.metrics_report(y, p, num_classes=3)
    assert rep.confusion == [[1, 1, 0], [0, 2, 0], [1, 0, 1]]
    assert rep.sensitivity == [0.5, 1.0, 0.5]
    assert rep.specificity == pytest.approx([3 / 4, 3 / 4, 1.0])
    assert rep.n == 6 and set(rep.to_dict()) >= {"accuracy", "mcc", "roc_auc_weighted"}
    with pytest.raises(DegenerateInputError):
        metrics.metrics_report([], [])
