"""Performance metrics and the monthly top-K deployment simulation.

Rank-based metrics (ROC-AUC, PR-AUC, top-K) order records by calibrated risk
when a run is calibrated, with raw score breaking ties inside a calibration
step (isotonic maps are monotone, so this never contradicts the calibrated
order), and by raw score otherwise.  Remaining ties go to the lower patient id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data_model import Run


def ranking_scores(run: Run) -> np.ndarray:
    """Scores whose order is the ranking order used for top-K and AUCs.

    For a calibrated run this is the dense rank of ``(calibrated_risk,
    raw_score)``; otherwise the raw score itself.
    """
    cached = getattr(run, "_ranking_scores", None)
    if cached is not None:
        return cached
    if not run.is_calibrated:
        out = np.asarray(run.raw_score)
    else:
        cal, raw = run.calibrated_risk, run.raw_score
        order = np.lexsort((raw, cal))
        new = np.ones(len(order), dtype=bool)
        new[1:] = (cal[order][1:] != cal[order][:-1]) | (raw[order][1:] != raw[order][:-1])
        out = np.empty(len(order))
        out[order] = np.cumsum(new)
    out = np.asarray(out, dtype=np.float64)
    out.setflags(write=False)
    run._ranking_scores = out
    return out


def roc_auc(scores, labels) -> float:
    """Mann-Whitney ROC-AUC with ties credited one half; NaN if a class is missing."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(s)  # average ranks: sums are exact half-integers
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision, sum over thresholds of (R_k - R_{k-1}) * P_k.

    Tied scores form one threshold.  NaN when there are no positives.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64)
    n_pos = y.sum()
    if n_pos == 0:
        return math.nan
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    predicted = np.flatnonzero(last) + 1.0
    precision = tp / predicted
    recall = tp / n_pos
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


def aggregated_metrics(run: Run) -> dict:
    s = ranking_scores(run)
    return {"roc_auc": roc_auc(s, run.labels), "pr_auc": pr_auc(s, run.labels)}


def _month_order(run: Run) -> dict[int, np.ndarray]:
    """Record indices of each month, highest risk first."""
    cached = getattr(run, "_month_order", None)
    if cached is not None:
        return cached
    s = ranking_scores(run)
    out = {}
    for month, sl in run.month_groups().items():
        # records are sorted by patient id inside a month; a stable sort keeps that for ties
        out[month] = sl.start + np.argsort(-s[sl], kind="stable")
    run._month_order = out
    return out


def top_k_indices(run: Run, month: int, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be a positive integer")
    order = _month_order(run).get(int(month))
    if order is None:
        return np.empty(0, dtype=np.int64)
    return order[:k]


def top_k(run: Run, month: int, k: int) -> list[str]:
    """The ``k`` highest-risk patients of ``month``, highest first."""
    return run.patient_ids[top_k_indices(run, month, k)].tolist()


@dataclass
class MonthlyEvaluation:
    months: list
    roc_auc: list
    pr_auc: list
    top_k: dict = field(default_factory=dict)
    k: int | None = None

    @staticmethod
    def _mean(values):
        defined = [v for v in values if not math.isnan(v)]
        return (sum(defined) / len(defined)) if defined else math.nan, len(defined)

    @property
    def mean_roc_auc(self):
        return self._mean(self.roc_auc)[0]

    @property
    def mean_pr_auc(self):
        return self._mean(self.pr_auc)[0]

    @property
    def n_roc_months(self):
        return self._mean(self.roc_auc)[1]

    @property
    def n_pr_months(self):
        return self._mean(self.pr_auc)[1]

    def to_dict(self):
        from .data_model import index_to_month

        return {
            "mean_roc_auc": _json_float(self.mean_roc_auc),
            "mean_pr_auc": _json_float(self.mean_pr_auc),
            "n_months": len(self.months),
            "n_roc_auc_months": self.n_roc_months,
            "n_pr_auc_months": self.n_pr_months,
            "months": [
                {
                    "month": index_to_month(m),
                    "roc_auc": _json_float(r),
                    "pr_auc": _json_float(p),
                    **({"top_k": self.top_k[m]} if self.k is not None else {}),
                }
                for m, r, p in zip(self.months, self.roc_auc, self.pr_auc)
            ],
        }


def _json_float(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def monthly_evaluate(run: Run, k: int | None = None) -> MonthlyEvaluation:
    """Metrics within each month; undefined months are left out of the averages."""
    if not len(run):
        raise ValueError("cannot evaluate an empty run")
    s = ranking_scores(run)
    months, rocs, prs, tops = [], [], [], {}
    for month, sl in run.month_groups().items():
        months.append(month)
        rocs.append(roc_auc(s[sl], run.labels[sl]))
        prs.append(pr_auc(s[sl], run.labels[sl]))
        if k is not None:
            tops[month] = top_k(run, month, k)
    return MonthlyEvaluation(months, rocs, prs, tops, k)


def evaluation_report(run: Run, monthly=True, k=None) -> dict:
    agg = aggregated_metrics(run)
    report = {"aggregated": {key: _json_float(v) for key, v in agg.items()}}
    if monthly:
        report["monthly"] = monthly_evaluate(run, k).to_dict()
    return report
