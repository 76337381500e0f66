"""Discrimination, calibration and paired-comparison statistics.

ROC-AUC is the Mann-Whitney statistic (ties count one half). PR-AUC is
step-wise average precision with tied scores entering a cut together.
Resampling uses one independently seeded substream per draw, keyed by
``(seed, draw_index)``, so results do not depend on chunking.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabels, UnpairedSets

ROC_AUC = "auc_roc"
PR_AUC = "pr_auc"

_CHUNK = 2048
_TIE_TOL = 1e-12


class ScoredSet:
    """Scores, boolean labels and admission ids of one model on one set."""

    def __init__(self, scores, labels, admission_ids=None):
        self.scores = np.asarray(scores, dtype=float)
        self.labels = np.asarray(labels).astype(bool)
        n = self.scores.size
        self.admission_ids = np.arange(n) if admission_ids is None else np.asarray(admission_ids, dtype=np.int64)
        if self.scores.ndim != 1 or self.labels.shape != (n,) or self.admission_ids.shape != (n,):
            raise ValueError("scores, labels and admission_ids must be 1-d and of equal length")

    def __len__(self) -> int:
        return self.scores.size

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())


def _auc_rows(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise Mann-Whitney AUC for 2-d arrays."""
    ranks = rankdata(scores, axis=1)
    n1 = labels.sum(axis=1)
    n0 = labels.shape[1] - n1
    r1 = np.where(labels, ranks, 0.0).sum(axis=1)
    return (r1 - n1 * (n1 + 1) / 2.0) / (n1 * n0)


def _ap_rows(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise average precision with tie groups entering together."""
    m, n = scores.shape
    order = np.argsort(-scores, axis=1, kind="stable")
    s = np.take_along_axis(scores, order, axis=1)
    y = np.take_along_axis(labels, order, axis=1).astype(float)
    tp = np.cumsum(y, axis=1)
    last = np.ones((m, n), dtype=bool)
    last[:, :-1] = s[:, :-1] != s[:, 1:]
    idx = np.where(last, np.arange(n), n)
    group_end = np.minimum.accumulate(idx[:, ::-1], axis=1)[:, ::-1]
    precision_at_end = np.take_along_axis(tp, group_end, axis=1) / (group_end + 1)
    return (y * precision_at_end).sum(axis=1) / y.sum(axis=1)


def _require_classes(s: ScoredSet, need_negative: bool = True) -> None:
    n_pos = s.n_pos
    if n_pos == 0 or (need_negative and n_pos == len(s)):
        raise DegenerateLabels("metric needs at least one positive" + (" and one negative" if need_negative else ""))


def roc_auc(s: ScoredSet) -> float:
    _require_classes(s)
    return float(_auc_rows(s.scores[None, :], s.labels[None, :])[0])


def pr_auc(s: ScoredSet) -> float:
    _require_classes(s, need_negative=False)
    return float(_ap_rows(s.scores[None, :], s.labels[None, :])[0])


_ROW_METRICS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {ROC_AUC: _auc_rows, PR_AUC: _ap_rows}
_METRICS: dict[str, Callable[[ScoredSet], float]] = {ROC_AUC: roc_auc, PR_AUC: pr_auc}


def metric_fn(name: str) -> Callable[[ScoredSet], float]:
    try:
        return _METRICS[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; expected one of {sorted(_METRICS)}") from None


def threshold_metrics(s: ScoredSet, threshold: float = 0.5) -> tuple[float, float, float]:
    """Precision, recall and F1 predicting positive when ``score >= threshold``."""
    pred = s.scores >= threshold
    tp = int(np.sum(pred & s.labels))
    fp = int(np.sum(pred & ~s.labels))
    fn = int(np.sum(~pred & s.labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def roc_points(s: ScoredSet) -> list[tuple[float, float]]:
    """(fpr, tpr) at every distinct score threshold, from (0, 0) to (1, 1)."""
    _require_classes(s)
    order = np.argsort(-s.scores, kind="stable")
    sc, y = s.scores[order], s.labels[order]
    cut = np.r_[np.nonzero(np.diff(sc))[0], len(sc) - 1]
    tp = np.cumsum(y)[cut]
    fp = (cut + 1) - tp
    pts = [(0.0, 0.0)]
    pts += [(float(f / (~s.labels).sum()), float(t / s.n_pos)) for t, f in zip(tp, fp)]
    return pts


def pr_points(s: ScoredSet) -> list[tuple[float, float]]:
    """(recall, precision) at every distinct score threshold."""
    _require_classes(s, need_negative=False)
    order = np.argsort(-s.scores, kind="stable")
    sc, y = s.scores[order], s.labels[order]
    cut = np.r_[np.nonzero(np.diff(sc))[0], len(sc) - 1]
    tp = np.cumsum(y)[cut]
    return [(float(t / s.n_pos), float(t / (c + 1))) for t, c in zip(tp, cut)]


def calibration_curve(s: ScoredSet, n_bins: int = 10) -> list[tuple[float, float, int]]:
    """(mean predicted, observed positive rate, count) for each non-empty equal-width bin."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    bins = np.minimum((s.scores * n_bins).astype(np.int64), n_bins - 1)
    bins = np.maximum(bins, 0)
    out = []
    for b in range(n_bins):
        sel = bins == b
        count = int(sel.sum())
        if count:
            out.append((float(s.scores[sel].mean()), float(s.labels[sel].mean()), count))
    return out


@dataclass
class BootstrapCI:
    lo: float
    hi: float
    level: float
    n_resamples: int
    redraws: int

    def to_json(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "level": self.level, "n_resamples": self.n_resamples, "redraws": self.redraws}


def bootstrap_distribution(s: ScoredSet, metric: str, n_resamples: int = 10000, seed: int = 0) -> tuple[np.ndarray, int]:
    """Metric values over ``n_resamples`` same-size resamples, plus the redraw count.

    A resample lacking one of the classes is redrawn from the same
    substream, so exactly ``n_resamples`` values are produced.
    """
    metric_rows = _ROW_METRICS[metric]
    need_negative = metric == ROC_AUC
    _require_classes(s, need_negative)
    n = len(s)
    values = np.empty(n_resamples)
    redraws = 0
    for start in range(0, n_resamples, _CHUNK):
        stop = min(start + _CHUNK, n_resamples)
        idx = np.empty((stop - start, n), dtype=np.int64)
        for r, i in enumerate(range(start, stop)):
            rng = np.random.default_rng([seed, i])
            while True:
                draw = rng.integers(0, n, size=n)
                k = s.labels[draw].sum()
                if k > 0 and (k < n or not need_negative):
                    break
                redraws += 1
            idx[r] = draw
        values[start:stop] = metric_rows(s.scores[idx], s.labels[idx])
    return values, redraws


def bootstrap_ci(s: ScoredSet, metric: str = ROC_AUC, n_resamples: int = 10000, level: float = 0.95, seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap interval (linear interpolation between order statistics)."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    values, redraws = bootstrap_distribution(s, metric, n_resamples, seed)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapCI(float(lo), float(hi), level, n_resamples, redraws)


@dataclass
class PermutationResult:
    p_value: float
    observed_delta: float
    n_permutations: int
    exact: bool


def check_paired(a: ScoredSet, b: ScoredSet) -> None:
    if len(a) != len(b) or not np.array_equal(a.admission_ids, b.admission_ids):
        raise UnpairedSets("scored sets cover different admissions")
    if not np.array_equal(a.labels, b.labels):
        raise UnpairedSets("scored sets disagree on labels")


def _swap_deltas(a: np.ndarray, b: np.ndarray, labels: np.ndarray, masks: np.ndarray, metric_rows) -> np.ndarray:
    sa = np.where(masks, b, a)
    sb = np.where(masks, a, b)
    y = np.broadcast_to(labels, masks.shape)
    return np.abs(metric_rows(sa, y) - metric_rows(sb, y))


def permutation_test(
    a: ScoredSet,
    b: ScoredSet,
    metric: str = ROC_AUC,
    n_permutations: int = 10000,
    seed: int = 0,
    exact: bool | None = None,
) -> PermutationResult:
    """Two-sided paired permutation test on ``|metric(a) - metric(b)|``.

    Each permutation swaps the two models' scores for every admission
    independently with probability 1/2. The sampled p-value is
    ``(1 + #{|d*| >= d}) / (1 + n_permutations)``. With ``exact`` (the
    default for n <= 10) all 2^n swap patterns are enumerated instead.
    """
    check_paired(a, b)
    fn = metric_fn(metric)
    metric_rows = _ROW_METRICS[metric]
    observed = abs(fn(a) - fn(b))
    n = len(a)
    if exact is None:
        exact = n <= 10
    threshold = observed - _TIE_TOL
    if exact:
        if n > 20:
            raise ValueError("exact enumeration is limited to n <= 20")
        masks = np.array(list(itertools.product((False, True), repeat=n)), dtype=bool).reshape(-1, n)
        deltas = _swap_deltas(a.scores, b.scores, a.labels, masks, metric_rows)
        return PermutationResult(float(np.mean(deltas >= threshold)), observed, masks.shape[0], True)

    hits = 0
    for start in range(0, n_permutations, _CHUNK):
        stop = min(start + _CHUNK, n_permutations)
        masks = np.stack([np.random.default_rng([seed, i]).random(n) < 0.5 for i in range(start, stop)])
        hits += int(np.sum(_swap_deltas(a.scores, b.scores, a.labels, masks, metric_rows) >= threshold))
    return PermutationResult((1 + hits) / (1 + n_permutations), observed, n_permutations, False)


def auc_standard_error(auc: float, n_pos: int, n_neg: int) -> float:
    """Hanley-McNeil standard error of an AUC estimate."""
    q1 = auc / (2 - auc)
    q2 = 2 * auc * auc / (1 + auc)
    var = (auc * (1 - auc) + (n_pos - 1) * (q1 - auc**2) + (n_neg - 1) * (q2 - auc**2)) / (n_pos * n_neg)
    return float(np.sqrt(max(var, 0.0)))
