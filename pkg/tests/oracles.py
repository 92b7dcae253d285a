"""Independent reference implementations used as test oracles.

Everything here is plain Python (integers, Fractions, loops) so it shares no
code path with the numpy implementation under test.
"""

from fractions import Fraction
from itertools import combinations

MOD = 2**64


def to_signed(v: int) -> int:
    v %= MOD
    return v - MOD if v >= 2**63 else v


def encode_exact(x: float, f: int) -> int:
    """round-half-even of x * 2**f as a ring residue."""
    return round(Fraction(x) * 2**f) % MOD


def matmul_mod(a, b):
    """Big-integer matrix product reduced mod 2**64."""
    n, k, m = len(a), len(b), len(b[0])
    return [[sum(int(a[i][t]) * int(b[t][j]) for t in range(k)) % MOD for j in range(m)] for i in range(n)]


def floor_shift(v: int, bits: int) -> int:
    """Floor division of the signed value by 2**bits, as a residue."""
    return (to_signed(v) // 2**bits) % MOD


def confusion(truth, pred, k):
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(truth, pred):
        cm[t][p] += 1
    return cm


def mcc_gorodkin(cm) -> float:
    """Multiclass MCC from the covariance form, summed element by element."""
    k = len(cm)
    n = sum(map(sum, cm))

    def cov(xf, yf):
        # cov(X, Y) = sum_k (n * sum_s x_sk y_sk - (sum_s x_sk)(sum_s y_sk)), expanded over the confusion cells
        total = 0.0
        for c in range(k):
            sxy = sum(cm[i][j] * xf(i, j, c) * yf(i, j, c) for i in range(k) for j in range(k))
            sx = sum(cm[i][j] * xf(i, j, c) for i in range(k) for j in range(k))
            sy = sum(cm[i][j] * yf(i, j, c) for i in range(k) for j in range(k))
            total += n * sxy - sx * sy
        return total

    pred_is = lambda i, j, c: 1.0 if j == c else 0.0  # noqa: E731
    true_is = lambda i, j, c: 1.0 if i == c else 0.0  # noqa: E731
    cxy = cov(pred_is, true_is)
    cxx = cov(pred_is, pred_is)
    cyy = cov(true_is, true_is)
    if cxx * cyy == 0:
        return 0.0
    return cxy / (cxx * cyy) ** 0.5


def kappa(a, b) -> float:
    n = len(a)
    labels = sorted(set(a) | set(b))
    po = sum(1 for x, y in zip(a, b) if x == y) / n
    pe = sum((a.count(c) / n) * (b.count(c) / n) for c in labels)
    if pe == 1.0:
        return 1.0 if po == 1.0 else 0.0
    return (po - pe) / (1 - pe)


def mcnemar(pred_a, pred_b, truth) -> float:
    b = sum(1 for x, y, t in zip(pred_a, pred_b, truth) if x == t and y != t)
    c = sum(1 for x, y, t in zip(pred_a, pred_b, truth) if x != t and y == t)
    if b + c == 0:
        return 0.0
    return (abs(b - c) - 1) ** 2 / (b + c)


def auc_pairs(scores, positive) -> float:
    """Probability a random positive outscores a random negative (ties count half)."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def auc_weighted(truth, scores) -> float:
    k = len(scores[0])
    total = weight = 0
    for c in range(k):
        positive = [t == c for t in truth]
        npos = sum(positive)
        if 0 < npos < len(truth):
            total += npos * auc_pairs([s[c] for s in scores], positive)
            weight += npos
    return total / weight


def pairs(names):
    return list(combinations(names, 2))
