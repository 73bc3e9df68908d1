"""Predictive-uncertainty metrics: NLL, accuracy, Brier, ECE, diversity and OOD scores."""

from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np
from scipy.stats import rankdata

from . import objectives

ECE_BINS = 15


def _check_probs(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("expected an (n, C) probability matrix")
    if probs.size and np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")
    return probs


def basic_metrics(probs, labels):
    """Return ``(nll, accuracy, brier)``; argmax ties go to the lowest class."""
    probs = _check_probs(probs)
    labels = np.asarray(labels, dtype=np.intp)
    n, C = probs.shape
    nll = objectives.ensemble_nll(probs, labels)
    accuracy = float(np.mean(np.argmax(probs, axis=1) == labels))
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    brier = float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))
    return nll, accuracy, brier


@dataclass
class CalibrationBin:
    lower: float
    upper: float
    count: int
    accuracy: float
    confidence: float


def ece(probs, labels, n_bins=ECE_BINS):
    """Expected calibration error over equal-width confidence bins.

    A confidence exactly on a bin edge belongs to the upper bin (confidence 1
    stays in the last bin). Returns ``(ece, bins)``.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    probs = _check_probs(probs)
    labels = np.asarray(labels, dtype=np.intp)
    n = len(labels)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    idx = np.minimum(np.floor(conf * n_bins).astype(np.intp), n_bins - 1)
    total = 0.0
    bins = []
    for b in range(n_bins):
        mask = idx == b
        cnt = int(mask.sum())
        if cnt:
            acc, c = float(correct[mask].mean()), float(conf[mask].mean())
            total += cnt / n * abs(acc - c)
        else:
            acc = c = 0.0
        bins.append(CalibrationBin(b / n_bins, (b + 1) / n_bins, cnt, acc, c))
    return float(total), bins


def diversity(member_preds, ensemble_accuracy):
    """Mean pairwise disagreement rate divided by (1 - ensemble accuracy).

    ``member_preds`` holds argmax labels (K, n) or probabilities (K, n, C).
    Returns ``None`` when the ensemble is perfectly accurate.
    """
    preds = np.asarray(member_preds)
    if preds.ndim == 3:
        preds = preds.argmax(axis=-1)
    K = preds.shape[0]
    if K < 2:
        raise ValueError("diversity needs at least two members")
    if ensemble_accuracy >= 1.0:
        return None
    dis = [np.mean(preds[i] != preds[j]) for i, j in combinations(range(K), 2)]
    return float(np.mean(dis) / (1.0 - ensemble_accuracy))


def ood_metrics(in_probs, out_probs):
    """Return ``(mmc_out, auroc, fpr_at_95_tpr)`` using max-probability confidence.

    In-distribution samples are the positive class. AUROC counts ties as one
    half. FPR@95 uses the highest threshold whose TPR reaches 0.95.
    """
    c_in = _check_probs(in_probs).max(axis=1)
    c_out = _check_probs(out_probs).max(axis=1)
    if not len(c_in) or not len(c_out):
        raise ValueError("both in- and out-of-distribution sets must be nonempty")
    mmc = float(c_out.mean())
    ranks = rankdata(np.concatenate([c_in, c_out]))  # average ranks give ties one half
    n_in, n_out = len(c_in), len(c_out)
    auroc = float((ranks[:n_in].sum() - n_in * (n_in + 1) / 2.0) / (n_in * n_out))
    # predicted positive iff confidence >= t; TPR(t) >= 0.95 holds for t up to this order statistic
    k = int(np.ceil(0.95 * n_in - 1e-9))
    t = np.sort(c_in)[::-1][k - 1]
    fpr = float(np.mean(c_out >= t))
    return mmc, auroc, fpr


@dataclass
class MetricReport:
    nll: float
    accuracy: float
    brier: float
    ece: float
    n: int
    diversity: float = None
    mmc: float = None
    auroc: float = None
    fpr95: float = None
    bins: list = field(default_factory=list)

    def to_dict(self, with_bins=False):
        d = asdict(self)
        if not with_bins:
            d.pop("bins")
        return d


def evaluate(member_probs, labels, n_bins=ECE_BINS, out_member_probs=None):
    """Full report for an ensemble given (K, n, C) member probabilities."""
    member_probs = np.asarray(member_probs, dtype=np.float64)
    if member_probs.ndim == 2:
        member_probs = member_probs[None]
    probs = member_probs.mean(axis=0)
    nll, acc, brier = basic_metrics(probs, labels)
    e, bins = ece(probs, labels, n_bins)
    report = MetricReport(nll, acc, brier, e, len(labels), bins=bins)
    if member_probs.shape[0] >= 2:
        report.diversity = diversity(member_probs, acc)
    if out_member_probs is not None:
        out = np.asarray(out_member_probs, dtype=np.float64)
        out = out.mean(axis=0) if out.ndim == 3 else out
        report.mmc, report.auroc, report.fpr95 = ood_metrics(probs, out)
    return report
