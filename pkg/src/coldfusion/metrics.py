"""Evaluation metrics: CCC, macro P/R/F1, ECE and reliability bins, temperature
scaling, Spearman rank correlation and the paired t-test."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata


def _pair(a, b, min_len=2):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < min_len:
        raise ValueError(f"need at least {min_len} items, got {a.size}")
    return a, b


def ccc(y_true, y_pred) -> float:
    """Lin's concordance correlation coefficient with population statistics.

    Uses 2 cov / (var_t + var_p + (mean_t - mean_p)^2), which stays defined
    when one sequence is constant. Returns 0 when the denominator vanishes.
    """
    t, p = _pair(y_true, y_pred)
    mt, mp = t.mean(), p.mean()
    cov = np.mean((t - mt) * (p - mp))
    denom = t.var() + p.var() + (mt - mp) ** 2
    if denom == 0:
        return 0.0
    return float(2.0 * cov / denom)


def macro_prf1(pred_classes, true_classes, K=3):
    pred = np.asarray(pred_classes).reshape(-1)
    true = np.asarray(true_classes).reshape(-1)
    if pred.size == 0:
        raise ValueError("macro_prf1: empty input")
    if pred.size != true.size:
        raise ValueError("macro_prf1: length mismatch")
    ps, rs, fs = [], [], []
    for k in range(K):
        tp = np.sum((pred == k) & (true == k))
        n_pred = np.sum(pred == k)
        n_true = np.sum(true == k)
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_true if n_true else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return float(np.mean(ps)), float(np.mean(rs)), float(np.mean(fs))


# ------------------------------------------------------------- calibration


@dataclass
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    @property
    def M(self):
        return len(self.counts)

    @property
    def ece(self):
        n = self.counts.sum()
        filled = self.counts > 0
        gaps = np.abs(self.accuracy[filled] - self.confidence[filled])
        return math.fsum(self.counts[filled] / n * gaps)


@dataclass
class CalibrationReport:
    ece_before: float
    temperature: float
    ece_after: float
    bins_before: ReliabilityBins
    bins_after: ReliabilityBins


def reliability_bins(confidences, correct, M=10) -> ReliabilityBins:
    """Equal-width bins over [0, 1]; bins are [low, high) except the last, which is closed."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    corr = np.asarray(correct, dtype=np.float64).reshape(-1)
    if conf.size == 0:
        raise ValueError("reliability_bins: empty input")
    if M < 1:
        raise ValueError("M must be >= 1")
    if conf.size != corr.size:
        raise ValueError("confidences and correct flags differ in length")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * M).astype(np.int64), M - 1)
    counts = np.bincount(idx, minlength=M)
    # exactly rounded sums keep hand-checkable cases exact
    acc_sum = np.array([math.fsum(corr[idx == m]) for m in range(M)])
    conf_sum = np.array([math.fsum(conf[idx == m]) for m in range(M)])
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, acc_sum / np.maximum(counts, 1), np.nan)
        mean_conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), np.nan)
    return ReliabilityBins(np.linspace(0.0, 1.0, M + 1), counts, acc, mean_conf)


def ece(confidences, correct, M=10) -> float:
    return reliability_bins(confidences, correct, M).ece


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def scaled_confidence(logits, true_classes, T=1.0):
    probs = softmax(np.asarray(logits, dtype=np.float64) / T)
    conf = probs.max(axis=-1)
    correct = probs.argmax(axis=-1) == np.asarray(true_classes)
    return conf.reshape(-1), correct.reshape(-1)


def temperature_search(logits, true_classes, M=10, rng=None, n_iter=100, low=1e-2, high=1e3):
    """Random log-uniform search for the ECE-minimizing temperature.

    T = 1 is always a candidate (and wins ties), so ECE never increases.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    candidates = np.concatenate([[1.0], np.exp(rng.uniform(np.log(low), np.log(high), n_iter))])
    conf, correct = scaled_confidence(logits, true_classes, 1.0)
    before = reliability_bins(conf, correct, M)
    best_t, best_bins = 1.0, before
    for T in candidates[1:]:
        bins = reliability_bins(*scaled_confidence(logits, true_classes, T), M)
        if bins.ece < best_bins.ece:
            best_t, best_bins = float(T), bins
    return CalibrationReport(before.ece, best_t, best_bins.ece, before, best_bins)


def reliability_export(bins: ReliabilityBins, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count", "mean_confidence", "mean_accuracy"])
        for m in range(bins.M):
            filled = bins.counts[m] > 0
            writer.writerow([
                repr(float(bins.edges[m])),
                repr(float(bins.edges[m + 1])),
                int(bins.counts[m]),
                repr(float(bins.confidence[m])) if filled else "",
                repr(float(bins.accuracy[m])) if filled else "",
            ])


def reliability_load(path) -> ReliabilityBins:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    edges = [float(rows[0]["bin_low"])] + [float(r["bin_high"]) for r in rows]

    def col(name):
        return np.array([float(r[name]) if r[name] != "" else np.nan for r in rows])

    counts = np.array([int(r["count"]) for r in rows])
    return ReliabilityBins(np.array(edges), counts, col("mean_accuracy"), col("mean_confidence"))


# ------------------------------------------------------------------- ranks


def spearman(x, y) -> float:
    """Pearson correlation of average ranks; 0 if either input is constant."""
    a, b = _pair(x, y)
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0:
        return 0.0
    return float(ra @ rb / denom)


# ---------------------------------------------------------- paired t-test


def _betacf(a, b, x, max_iter=500, eps=1e-16):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_regularized(a, b, x):
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t, df):
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return betainc_regularized(df / 2.0, 0.5, x)


class TTest(NamedTuple):
    statistic: float
    pvalue: float
    degenerate: bool = False


def paired_t_test(errors_a, errors_b) -> TTest:
    """Two-sided paired t-test on per-unit errors.

    Zero-variance differences: p = 1 if the mean difference is 0, else
    p = 0 with ``degenerate`` set.
    """
    a, b = _pair(errors_a, errors_b)
    d = a - b
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    # spread at rounding level counts as zero variance
    if sd <= 1e-12 * np.abs(d).max():
        if mean == 0:
            return TTest(0.0, 1.0, True)
        return TTest(math.copysign(math.inf, mean), 0.0, True)
    t = float(mean / (sd / math.sqrt(n)))
    return TTest(t, student_t_two_sided_p(t, n - 1), False)
