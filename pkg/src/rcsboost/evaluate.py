"""Ranking metrics under downsampled controls.

Precision is rescaled by the control downsampling factor ``k`` so that each
sampled false positive stands for ``k`` real ones; confidence intervals are
Beta quantiles on the rescaled counts.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from .claims import Kind, Population
from .cohort import LabeledCrossSection, _KEY_STRIDE, key_mask
from .months import add_months
from .rcs import CrossSection

RECALL_DECILES = tuple(round(0.1 * i, 1) for i in range(1, 11))
_RECALL_EPS = 1e-12


class MetricError(ValueError):
    """Degenerate input for a ranking metric."""


@dataclass(frozen=True)
class RankedPredictions:
    scores: np.ndarray
    labels: np.ndarray
    n_full: int | None = None
    n_sampled: int | None = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        y = np.asarray(self.labels).astype(bool)
        if s.shape != y.shape or s.ndim != 1:
            raise MetricError("scores and labels must be 1-D arrays of equal length")
        if not np.all(np.isfinite(s)):
            raise MetricError("scores must be finite")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)
        neg = int((~y).sum())
        n_sampled = neg if self.n_sampled is None else int(self.n_sampled)
        n_full = n_sampled if self.n_full is None else int(self.n_full)
        if not n_full >= n_sampled >= neg:
            raise MetricError(f"need n_full >= n_sampled >= negatives ({n_full}, {n_sampled}, {neg})")
        object.__setattr__(self, "n_full", n_full)
        object.__setattr__(self, "n_sampled", n_sampled)

    @property
    def k(self) -> float:
        return self.n_full / self.n_sampled if self.n_sampled else 1.0

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return int((~self.labels).sum())

    @property
    def incidence(self) -> float:
        p = self.n_positive
        return p / (p + self.n_full) if p + self.n_full else 0.0


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    recall: float
    precision_raw: float
    precision_rescaled: float
    ci_low: float
    ci_high: float


# --- scalar formulas ------------------------------------------------------------

def rescale_precision(tp: float, fp: float, k: float) -> float:
    if tp + fp <= 0:
        raise MetricError("precision undefined with no predicted positives")
    if k < 1:
        raise MetricError("downsampling factor k must be >= 1")
    return tp / (tp + k * fp)


def fold_improvement(precision_rescaled: float, incidence: float) -> float:
    if incidence <= 0:
        raise MetricError("incidence must be positive")
    return precision_rescaled / incidence


def beta_quantile(q, a, b, tol: float = 1e-12):
    """Quantile of Beta(a, b) by bisection on the regularized incomplete beta."""
    q, a, b = np.broadcast_arrays(np.asarray(q, float), np.asarray(a, float), np.asarray(b, float))
    lo = np.zeros(q.shape)
    hi = np.ones(q.shape)
    while True:
        mid = 0.5 * (lo + hi)
        below = betainc(a, b, mid) < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo < tol):
            break
    out = 0.5 * (lo + hi)
    return out if out.ndim else float(out)


def precision_ci(tp, fp, k: float = 1.0, level: float = 0.95):
    """Equal-tailed interval of Beta(tp + 1, k*fp + 1)."""
    a = np.asarray(tp, float) + 1.0
    b = k * np.asarray(fp, float) + 1.0
    tail = (1.0 - level) / 2.0
    lo = beta_quantile(tail, a, b)
    hi = beta_quantile(1.0 - tail, a, b)
    return lo, hi


# --- curves -----------------------------------------------------------------------

def _sweep(scores: np.ndarray, labels: np.ndarray):
    """Confusion counts at each distinct score, tied scores entering as one block."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = ends + 1 - tp
    return s[ends], tp.astype(np.int64), fp.astype(np.int64)


def _check(preds: RankedPredictions):
    if preds.n_positive == 0 or preds.n_negative == 0:
        raise MetricError("both classes must be present")


def pr_curve(preds: RankedPredictions, level: float = 0.95) -> list[PRPoint]:
    _check(preds)
    thr, tp, fp = _sweep(preds.scores, preds.labels)
    P = preds.n_positive
    k = preds.k
    fn = P - tp
    recall = tp / P
    prec_raw = tp / (tp + fp)
    prec = tp / (tp + k * fp)
    lo, hi = precision_ci(tp, fp, k, level)
    return [
        PRPoint(float(thr[i]), int(tp[i]), int(fp[i]), int(fn[i]), float(recall[i]),
                float(prec_raw[i]), float(prec[i]), float(lo[i]), float(hi[i]))
        for i in range(len(thr))
    ]


def _step_area(recall: Sequence[float], values: Sequence[float]) -> float:
    area = 0.0
    prev = 0.0
    for r, v in zip(recall, values):
        area += (r - prev) * v
        prev = r
    return area


def auprc(curve: Sequence[PRPoint]) -> float:
    """Right-continuous step integral of rescaled precision over recall."""
    return _step_area([p.recall for p in curve], [p.precision_rescaled for p in curve])


def auprc_interval(curve: Sequence[PRPoint]) -> tuple[float, float]:
    rec = [p.recall for p in curve]
    return _step_area(rec, [p.ci_low for p in curve]), _step_area(rec, [p.ci_high for p in curve])


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Unscaled AUPRC, used for early stopping and tuning (no CI work)."""
    labels = np.asarray(labels).astype(bool)
    P = int(labels.sum())
    if P == 0 or P == len(labels):
        raise MetricError("both classes must be present")
    _, tp, fp = _sweep(np.asarray(scores, float), labels)
    recall = tp / P
    prec = tp / (tp + fp)
    return _step_area(recall.tolist(), prec.tolist())


def roc_curve(preds: RankedPredictions) -> tuple[np.ndarray, np.ndarray]:
    _check(preds)
    _, tp, fp = _sweep(preds.scores, preds.labels)
    fpr = np.r_[0.0, fp / preds.n_negative]
    tpr = np.r_[0.0, tp / preds.n_positive]
    return fpr, tpr


def auroc(preds: RankedPredictions) -> float:
    """Probability a random positive outranks a random negative; ties count one half."""
    _check(preds)
    ranks = rankdata(preds.scores)
    P, N = preds.n_positive, preds.n_negative
    u = ranks[preds.labels].sum() - P * (P + 1) / 2.0
    return float(u / (P * N))


def point_at_recall(curve: Sequence[PRPoint], recall: float) -> PRPoint:
    """First operating point (highest threshold) whose recall reaches ``recall``."""
    for p in curve:
        if p.recall >= recall - _RECALL_EPS:
            return p
    return curve[-1]


# --- benchmark screens ------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkResult:
    rule: str
    n_flagged: int
    recall: float
    precision_rescaled: float | None
    fold: float | None
    model_precision_rescaled: float | None = None
    model_fold: float | None = None


def rule_flags(pop: Population, rows: Sequence[LabeledCrossSection], cross_sections: Iterable[CrossSection],
               rule_codes: Iterable[tuple[Kind, str]], window_months: int = 24) -> np.ndarray:
    """Whether each row has a rule code in the ``window_months`` before (and on) its index date."""
    mask = key_mask(pop, rule_codes)
    keys = pop.event_patient[mask] * _KEY_STRIDE + pop.days[mask].astype(np.int64)
    by_id = {cs.id: cs for cs in cross_sections}
    p = np.array([pop.index_of(r.patient_id) for r in rows], dtype=np.int64)
    idx = np.array([by_id[r.cs_id].index_date.toordinal() for r in rows], dtype=np.int64)
    lo = np.array([add_months(by_id[r.cs_id].index_date, -window_months).toordinal() for r in rows],
                  dtype=np.int64)
    if len(rows) == 0:
        return np.zeros(0, dtype=bool)
    a = np.searchsorted(keys, p * _KEY_STRIDE + lo, side="left")
    b = np.searchsorted(keys, p * _KEY_STRIDE + idx, side="right")
    return b > a


def benchmark_rule(name: str, flags: np.ndarray, labels: np.ndarray, k: float, incidence: float,
                   curve: Sequence[PRPoint] | None = None) -> BenchmarkResult:
    flags = np.asarray(flags, bool)
    labels = np.asarray(labels, bool)
    P = int(labels.sum())
    tp = int((flags & labels).sum())
    fp = int((flags & ~labels).sum())
    recall = tp / P if P else 0.0
    if tp + fp == 0:
        return BenchmarkResult(name, 0, recall, None, None)
    prec = rescale_precision(tp, fp, k)
    fold = fold_improvement(prec, incidence) if incidence > 0 else None
    mp = mf = None
    if curve is not None and recall > 0:
        pt = point_at_recall(curve, recall)
        mp = pt.precision_rescaled
        mf = fold_improvement(mp, incidence) if incidence > 0 else None
    return BenchmarkResult(name, tp + fp, recall, prec, fold, mp, mf)


# --- report -------------------------------------------------------------------------

@dataclass
class EvalReport:
    cs_id: int | None
    n_rows: int
    n_positive: int
    n_controls_sampled: int
    n_controls_full: int
    k: float
    incidence: float
    auprc: float
    auprc_ci: tuple[float, float]
    auroc: float
    curve: list[PRPoint] = field(repr=False)
    roc: tuple[np.ndarray, np.ndarray] = field(repr=False)
    deciles: list[dict] = field(default_factory=list)
    benchmarks: list[BenchmarkResult] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "cs_id": self.cs_id,
            "n_rows": self.n_rows,
            "n_positive": self.n_positive,
            "n_controls_sampled": self.n_controls_sampled,
            "n_controls_full": self.n_controls_full,
            "downsampling_factor": self.k,
            "incidence": self.incidence,
            "auprc": self.auprc,
            "auprc_ci": list(self.auprc_ci),
            "auroc": self.auroc,
            "deciles": self.deciles,
            "benchmarks": [asdict(b) for b in self.benchmarks],
        }


def evaluate_predictions(preds: RankedPredictions, *, cs_id: int | None = None,
                         benchmark_flags: dict[str, np.ndarray] | None = None,
                         level: float = 0.95) -> EvalReport:
    curve = pr_curve(preds, level)
    inc = preds.incidence
    deciles = []
    for r in RECALL_DECILES:
        pt = point_at_recall(curve, r)
        deciles.append({
            "recall_target": r,
            "threshold": pt.threshold,
            "recall": pt.recall,
            "tp": pt.tp,
            "fp": pt.fp,
            "precision_raw": pt.precision_raw,
            "precision_rescaled": pt.precision_rescaled,
            "ci_low": pt.ci_low,
            "ci_high": pt.ci_high,
            "fold_improvement": fold_improvement(pt.precision_rescaled, inc) if inc > 0 else None,
        })
    benches = [
        benchmark_rule(name, flags, preds.labels, preds.k, inc, curve)
        for name, flags in (benchmark_flags or {}).items()
    ]
    return EvalReport(
        cs_id=cs_id,
        n_rows=len(preds.scores),
        n_positive=preds.n_positive,
        n_controls_sampled=preds.n_sampled,
        n_controls_full=preds.n_full,
        k=preds.k,
        incidence=inc,
        auprc=auprc(curve),
        auprc_ci=auprc_interval(curve),
        auroc=auroc(preds),
        curve=curve,
        roc=roc_curve(preds),
        deciles=deciles,
        benchmarks=benches,
    )


def write_curves(report: EvalReport, directory: str | Path, suffix: str = "") -> None:
    d = Path(directory)
    with open(d / f"pr_curve{suffix}.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["recall", "precision_raw", "precision_rescaled", "ci_low", "ci_high"])
        for p in report.curve:
            w.writerow([repr(p.recall), repr(p.precision_raw), repr(p.precision_rescaled),
                        repr(p.ci_low), repr(p.ci_high)])
    with open(d / f"roc_curve{suffix}.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for a, b in zip(*report.roc):
            w.writerow([repr(float(a)), repr(float(b))])


def dump_json(obj, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
