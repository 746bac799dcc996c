"""Training loss and evaluation metrics for multilabel score matrices.

Every metric takes a :class:`PredictionSet` (``N x C`` probabilities plus
``N x C`` binary labels). Decisions threshold at 0.5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numcore import sigmoid
from .wafersynth import CLASSES

EPS = 1e-7


@dataclass
class PredictionSet:
    scores: np.ndarray
    labels: np.ndarray
    class_names: Sequence[str] = CLASSES

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape != self.labels.shape:
            raise ValueError(f"scores {self.scores.shape} and labels {self.labels.shape} must be equal N x C")
        if len(self.class_names) != self.scores.shape[1]:
            raise ValueError(f"{len(self.class_names)} class names for {self.scores.shape[1]} columns")
        if not np.all(np.isfinite(self.scores)) or self.scores.min(initial=0) < 0 or self.scores.max(initial=0) > 1:
            raise ValueError("scores must be finite probabilities in [0, 1]")
        if not np.isin(self.labels, (0.0, 1.0)).all():
            raise ValueError("labels must be 0/1")

    @property
    def N(self) -> int:
        return self.scores.shape[0]

    @property
    def C(self) -> int:
        return self.scores.shape[1]

    def class_index(self, name_or_index) -> int:
        if isinstance(name_or_index, str):
            return list(self.class_names).index(name_or_index)
        return int(name_or_index)

    def subset(self, idx) -> "PredictionSet":
        return PredictionSet(self.scores[idx], self.labels[idx], self.class_names)


# --- focal loss -----------------------------------------------------------

def _alpha_weights(alpha, labels: np.ndarray):
    """Positive/negative term weights per class; ``None`` disables balancing."""
    C = labels.shape[1]
    if alpha is None:
        return np.ones(C), np.ones(C)
    if isinstance(alpha, str):
        if alpha != "inverse_frequency":
            raise ValueError(f"unknown alpha mode {alpha!r}")
        # rare positives weigh more: alpha_c = 1 - class frequency
        a = 1.0 - labels.mean(axis=0)
    else:
        a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (C,))
    return a, 1.0 - a


def focal_loss_per_sample(scores, labels, gamma: float = 2.0, alpha=None, eps: float = EPS) -> np.ndarray:
    """Binary focal loss of each sample, summed over its labels (see :func:`focal_loss`)."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = np.clip(np.asarray(scores, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    a_pos, a_neg = _alpha_weights(alpha, y)
    pos = a_pos * (1.0 - p) ** gamma * y * np.log(p)
    neg = a_neg * p ** gamma * (1.0 - y) * np.log(1.0 - p)
    return -np.sum(pos + neg, axis=1)


def focal_loss(scores, labels, gamma: float = 2.0, alpha=None, eps: float = EPS) -> float:
    """Binary focal loss summed over labels and averaged over samples.

    ``alpha`` may be ``None`` (both terms weighted 1), a scalar or per-class
    array (positive term weighted ``alpha_c``, negative term ``1 - alpha_c``),
    or ``"inverse_frequency"``. With ``alpha=1`` only the positive terms remain.
    """
    return float(np.mean(focal_loss_per_sample(scores, labels, gamma, alpha, eps)))


def focal_loss_from_logits(logits, labels, gamma: float = 2.0, alpha=None, eps: float = EPS):
    """``(loss, dloss/dlogits)`` for ``scores = sigmoid(logits)``.

    Entries whose probability is clamped by ``eps`` get zero gradient.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    p_raw = sigmoid(z)
    loss = focal_loss(p_raw, y, gamma, alpha, eps)
    p = np.clip(p_raw, eps, 1.0 - eps)
    a_pos, a_neg = _alpha_weights(alpha, y)
    q = 1.0 - p
    # d/dz of -a (1-p)^g log p and of -a' p^g log(1-p), using dp/dz = p q
    d_pos = a_pos * (gamma * p * q ** gamma * np.log(p) - q ** (gamma + 1))
    d_neg = a_neg * (p ** (gamma + 1) - gamma * q * p ** gamma * np.log(q))
    grad = (y * d_pos + (1.0 - y) * d_neg) / z.shape[0]
    grad = np.where((p_raw > eps) & (p_raw < 1.0 - eps), grad, 0.0)
    return loss, grad


def binary_cross_entropy(scores, labels, eps: float = EPS) -> float:
    """Per-sample sum over labels of BCE, averaged over samples."""
    p = np.clip(np.asarray(scores, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(np.sum(y * np.log(p) + (1 - y) * np.log(1 - p), axis=1)))


# --- multilabel suite -----------------------------------------------------

def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """All-points AP; tied scores share one threshold (precision over the tie group)."""
    pos = labels > 0.5
    n_pos = int(pos.sum())
    if n_pos == 0:
        return float("nan")
    asc_all = np.sort(scores)
    asc_pos = np.sort(scores[pos])
    s = scores[pos]
    n_ge_all = scores.size - np.searchsorted(asc_all, s, side="left")
    n_ge_pos = n_pos - np.searchsorted(asc_pos, s, side="left")
    return float(np.mean(n_ge_pos / n_ge_all))


def hamming_loss(ps: PredictionSet, threshold: float = 0.5) -> float:
    return float(np.mean((ps.scores >= threshold) != (ps.labels > 0.5)))


def ranking_loss(ps: PredictionSet) -> float:
    """Mean fraction of (positive, negative) pairs with negative score >= positive score.

    Samples with no positives or no negatives contribute 0.
    """
    s, y = ps.scores, ps.labels > 0.5
    wrong = (s[:, None, :] >= s[:, :, None]) & y[:, :, None] & ~y[:, None, :]
    n_pairs = y.sum(1) * (~y).sum(1)
    per = np.where(n_pairs > 0, wrong.sum(axis=(1, 2)) / np.maximum(n_pairs, 1), 0.0)
    return float(per.mean())


def coverage_error(ps: PredictionSet) -> float:
    """Mean count of labels scored at or above the lowest-scored true label (0 if none)."""
    s, y = ps.scores, ps.labels > 0.5
    worst = np.where(y, s, np.inf).min(axis=1)
    cov = np.where(y.any(axis=1), (s >= worst[:, None]).sum(axis=1), 0)
    return float(cov.mean())


def kendall_tau_b(x: np.ndarray, y: np.ndarray) -> float:
    """Kendall tau-b of two vectors; nan when either is constant."""
    iu = np.triu_indices(x.size, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    n0 = sx.size
    denom = math.sqrt(float(n0 - np.sum(sx == 0)) * float(n0 - np.sum(sy == 0)))
    if denom == 0.0:
        return float("nan")
    return float(np.sum(sx * sy) / denom)


def multilabel_suite(ps: PredictionSet) -> dict:
    """mAP, Hamming, ranking loss, coverage error and mean per-sample Kendall tau-b.

    Classes with no positive are left out of mAP and listed under
    ``skipped_classes``; samples with a constant label vector are left out of
    Kendall tau and counted in ``tau_skipped``.
    """
    if ps.N < 1:
        raise ValueError("empty prediction set")
    ap = [average_precision(ps.scores[:, c], ps.labels[:, c]) for c in range(ps.C)]
    skipped = [ps.class_names[c] for c in range(ps.C) if math.isnan(ap[c])]
    valid_ap = [a for a in ap if not math.isnan(a)]
    taus = [kendall_tau_b(ps.scores[i], ps.labels[i]) for i in range(ps.N)]
    valid_tau = [t for t in taus if not math.isnan(t)]
    return {
        "mAP": float(np.mean(valid_ap)) if valid_ap else float("nan"),
        "hamming": hamming_loss(ps),
        "ranking_loss": ranking_loss(ps),
        "coverage_error": coverage_error(ps),
        "kendall_tau": float(np.mean(valid_tau)) if valid_tau else float("nan"),
        "ap_per_class": dict(zip(ps.class_names, ap)),
        "skipped_classes": skipped,
        "tau_skipped": len(taus) - len(valid_tau),
    }


# --- calibration ----------------------------------------------------------

@dataclass
class CalibrationBin:
    lo: float
    hi: float
    count: int
    mean_confidence: float
    accuracy: float


@dataclass
class CalibrationReport:
    ece: float
    mce: float
    brier: float
    nll: float
    acc_at_conf90: float
    mean_entropy: float
    ambiguous_frac: float
    bins: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("ece", "mce", "brier", "nll", "acc_at_conf90", "mean_entropy", "ambiguous_frac")}


def decision_confidence(ps: PredictionSet):
    """Flattened per-label confidence ``max(p, 1-p)`` and correctness at 0.5."""
    p, y = ps.scores.reshape(-1), ps.labels.reshape(-1) > 0.5
    return np.maximum(p, 1.0 - p), (p >= 0.5) == y


def calibration_suite(ps: PredictionSet, n_bins: int = 15, ambiguous_band=(0.4, 0.6),
                      eps: float = EPS) -> CalibrationReport:
    """Calibration over all ``N * C`` label decisions with equal-width bins on [0, 1].

    A confidence ``c`` lands in bin ``min(floor(c * n_bins), n_bins - 1)``.
    Entropy is in nats. ``ambiguous_frac`` counts samples with any label
    probability inside ``ambiguous_band`` (inclusive).
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if ps.N == 0:
        raise ValueError("empty prediction set")
    conf, correct = decision_confidence(ps)
    idx = np.minimum(np.floor(conf * n_bins).astype(int), n_bins - 1)
    total = conf.size
    ece, mce, bins = 0.0, 0.0, []
    for b in range(n_bins):
        sel = idx == b
        n_b = int(sel.sum())
        if n_b == 0:
            bins.append(CalibrationBin(b / n_bins, (b + 1) / n_bins, 0, float("nan"), float("nan")))
            continue
        c_b, a_b = float(conf[sel].mean()), float(correct[sel].mean())
        gap = abs(a_b - c_b)
        ece += n_b / total * gap
        mce = max(mce, gap)
        bins.append(CalibrationBin(b / n_bins, (b + 1) / n_bins, n_b, c_b, a_b))
    p = ps.scores.reshape(-1)
    y = ps.labels.reshape(-1)
    pc = np.clip(p, eps, 1.0 - eps)
    high = conf >= 0.9
    lo, hi = ambiguous_band
    return CalibrationReport(
        ece=ece,
        mce=mce,
        brier=float(np.mean((p - y) ** 2)),
        nll=float(np.mean(-(y * np.log(pc) + (1 - y) * np.log(1 - pc)))),
        acc_at_conf90=float(correct[high].mean()) if high.any() else float("nan"),
        mean_entropy=float(np.mean(-(pc * np.log(pc) + (1 - pc) * np.log(1 - pc)))),
        ambiguous_frac=float(np.mean(((ps.scores >= lo) & (ps.scores <= hi)).any(axis=1))),
        bins=bins,
    )


# --- complexity breakdown -------------------------------------------------

def complexity_breakdown(ps: PredictionSet, defect_counts=None, levels=(1, 2, 3, 4)) -> list[dict]:
    """Subset accuracy and mean wrong bits per wafer, grouped by concurrent defect count."""
    counts = ps.labels.sum(axis=1).astype(int) if defect_counts is None else np.asarray(defect_counts)
    if counts.shape != (ps.N,):
        raise ValueError(f"{counts.shape} defect counts for {ps.N} samples")
    wrong = ((ps.scores >= 0.5) != (ps.labels > 0.5)).sum(axis=1)
    rows = []
    for k in levels:
        sel = counts == k
        n = int(sel.sum())
        rows.append({
            "defects": k,
            "count": n,
            "subset_accuracy": float(np.mean(wrong[sel] == 0)) if n else float("nan"),
            "errors_per_wafer": float(np.mean(wrong[sel])) if n else float("nan"),
        })
    return rows


# --- risk curves ----------------------------------------------------------

@dataclass
class RiskCurve:
    name: str
    grid: np.ndarray
    values: np.ndarray
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grid.ndim != 1 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("risk curve grid must be strictly increasing")


def macro_f1(ps: PredictionSet, threshold: float = 0.5):
    """Mean per-class F1 over classes with at least one positive; returns ``(f1, skipped)``."""
    pred = ps.scores >= threshold
    y = ps.labels > 0.5
    f1s, skipped = [], []
    for c in range(ps.C):
        if not y[:, c].any():
            skipped.append(ps.class_names[c])
            continue
        tp = np.sum(pred[:, c] & y[:, c])
        fp = np.sum(pred[:, c] & ~y[:, c])
        fn = np.sum(~pred[:, c] & y[:, c])
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return (float(np.mean(f1s)) if f1s else float("nan")), skipped


def sample_confidence(ps: PredictionSet) -> np.ndarray:
    """Least confident label decision per sample: ``min_c max(p, 1-p)``."""
    return np.maximum(ps.scores, 1.0 - ps.scores).min(axis=1)


def n_retained(q: float, N: int) -> int:
    # round first so 0.7 * 10 counts as 7, not 8
    return int(math.ceil(round(q * N, 9)))


def selective_prediction(ps: PredictionSet, coverage_grid) -> RiskCurve:
    """Macro-F1 over the ``ceil(q N)`` most confident samples for each coverage ``q``.

    Ties in confidence keep the original sample order.
    """
    grid = np.asarray(coverage_grid, dtype=np.float64)
    if np.any(grid <= 0) or np.any(grid > 1):
        raise ValueError("coverage values must lie in (0, 1]")
    if ps.N == 0:
        raise ValueError("empty retention set")
    order = np.argsort(-sample_confidence(ps), kind="stable")
    values, skipped = [], []
    for q in grid:
        keep = order[:n_retained(q, ps.N)]
        f1, skip = macro_f1(ps.subset(keep))
        values.append(f1)
        skipped.append(skip)
    return RiskCurve("selective_macro_f1", grid, values, skipped)


def catastrophic_miss_rate(ps: PredictionSet, critical_class="Near_Full", threshold_grid=None) -> RiskCurve:
    """Fraction of the critical class's positives scored below each threshold."""
    c = ps.class_index(critical_class)
    pos = ps.labels[:, c] > 0.5
    if not pos.any():
        raise ValueError(f"critical class {ps.class_names[c]!r} has no positives")
    grid = np.linspace(0.0, 1.0, 101) if threshold_grid is None else np.asarray(threshold_grid, dtype=np.float64)
    s = ps.scores[pos, c]
    values = [(s < t).mean() for t in grid]
    return RiskCurve(f"miss_rate_{ps.class_names[c]}", grid, values)


def expected_fp_cost(ps: PredictionSet, cost_per_fp: float = 1.0, threshold_grid=None) -> RiskCurve:
    """False-positive label decisions (``p >= t`` on a negative) times cost, per wafer."""
    if cost_per_fp < 0:
        raise ValueError("cost_per_fp must be >= 0")
    grid = np.linspace(0.0, 1.0, 101) if threshold_grid is None else np.asarray(threshold_grid, dtype=np.float64)
    neg = ps.labels < 0.5
    values = [np.sum((ps.scores >= t) & neg) * cost_per_fp / ps.N for t in grid]
    return RiskCurve("expected_fp_cost", grid, values)
