"""Run-to-run stability metrics over a RunSet.

* AUC dispersion: sample standard deviation of per-run ROC-AUC / PR-AUC.
* Top-K pairwise Jaccard J(K): per month, the mean Jaccard index of the top-K
  sets over all run pairs; reported as mean and standard deviation over months.
* Kendall's tau-a and hyperbolically weighted tau between run pairs.

Both tau variants are derived from per-element concordance balances
``S_i = sum_j sign(x_i - x_j) * sign(y_i - y_j)``, computed in O(n log n) with a
Fenwick tree.  Then ``tau_a = sum(S) / (n (n - 1))`` and, with position weights
``h_i = 1 / (r_i + 1)``, the pair weight ``h_i + h_j`` gives a weighted
numerator ``sum_i h_i S_i`` over the denominator ``(n - 1) * sum_i h_i``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .data_model import RunSet, index_to_month
from .evaluation import aggregated_metrics, ranking_scores, top_k_indices

log = logging.getLogger(__name__)


@numba.njit(cache=True)
def _fenwick_add(tree, i):
    while i < tree.shape[0]:
        tree[i] += 1
        i += i & (-i)


@numba.njit(cache=True)
def _fenwick_prefix(tree, i):
    total = 0
    while i > 0:
        total += tree[i]
        i -= i & (-i)
    return total


@numba.njit(cache=True)
def _dense_ranks(v):
    n = v.shape[0]
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(n, dtype=np.int64)
    r = 0
    for t in range(n):
        if t == 0 or v[order[t]] != v[order[t - 1]]:
            r += 1
        ranks[order[t]] = r
    return ranks, r


@numba.njit(cache=True)
def concordance_balance(x, y):
    """``S_i = sum_{j != i} sign(x_i - x_j) * sign(y_i - y_j)`` for every i."""
    n = x.shape[0]
    ry, m = _dense_ranks(y)
    order = np.argsort(x, kind="mergesort")
    s = np.zeros(n, dtype=np.int64)

    # partners with smaller x
    tree = np.zeros(m + 1, dtype=np.int64)
    inserted = 0
    i = 0
    while i < n:
        j = i
        while j < n and x[order[j]] == x[order[i]]:
            j += 1
        for t in range(i, j):
            idx = order[t]
            r = ry[idx]
            less = _fenwick_prefix(tree, r - 1)
            greater = inserted - _fenwick_prefix(tree, r)
            s[idx] += less - greater
        for t in range(i, j):
            _fenwick_add(tree, ry[order[t]])
        inserted += j - i
        i = j

    # partners with larger x
    tree = np.zeros(m + 1, dtype=np.int64)
    inserted = 0
    i = n - 1
    while i >= 0:
        j = i
        while j >= 0 and x[order[j]] == x[order[i]]:
            j -= 1
        for t in range(i, j, -1):
            idx = order[t]
            r = ry[idx]
            less = _fenwick_prefix(tree, r - 1)
            greater = inserted - _fenwick_prefix(tree, r)
            s[idx] += greater - less
        for t in range(i, j, -1):
            _fenwick_add(tree, ry[order[t]])
        inserted += i - j
        i = j
    return s


def _check_pair(x, y):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("score lists must be 1-D and of equal length")
    if len(x) < 2:
        raise ValueError("Kendall's tau needs at least two paired scores")
    return x, y


def descending_positions(scores):
    """0-based rank of each item by descending score; ties keep input order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    pos = np.empty(len(order), dtype=np.int64)
    pos[order] = np.arange(len(order))
    return pos


def _taus(x, y):
    x, y = _check_pair(x, y)
    n = len(x)
    s = concordance_balance(x, y).astype(np.float64)
    tau = float(s.sum() / (n * (n - 1.0)))
    full = np.full(n, n - 1.0)
    weighted = []
    for scores in (x, y):
        h = 1.0 / (descending_positions(scores) + 1.0)
        # same summation path on both sides, so identical or reversed lists give exactly +-1
        weighted.append(float(np.dot(h, s) / np.dot(h, full)))
    return tau, float(np.clip(0.5 * (weighted[0] + weighted[1]), -1.0, 1.0))


def kendall_tau(x_scores, y_scores) -> float:
    """Kendall's tau-a: (concordant - discordant) / C(n, 2); ties count as neither."""
    return _taus(x_scores, y_scores)[0]


def weighted_kendall_tau(x_scores, y_scores) -> float:
    """Hyperbolically weighted Kendall's tau, symmetrised over both rankings.

    Each pair weighs ``1/(r_i+1) + 1/(r_j+1)`` with 0-based descending ranks
    taken from one list; the tau is evaluated once with ranks from ``x`` and
    once with ranks from ``y`` and the two values are averaged.
    """
    return _taus(x_scores, y_scores)[1]


def jaccard_pair(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _jaccard_indices(a, b):
    inter = len(np.intersect1d(a, b, assume_unique=True))
    union = len(a) + len(b) - inter
    return 1.0 if union == 0 else inter / union


def jaccard_by_month(run_set: RunSet, k: int) -> dict[int, float]:
    """Mean pairwise Jaccard of each month's top-K sets."""
    run_set.require(2)
    runs = run_set.runs
    out = {}
    for month in run_set.reference.month_groups():
        tops = [top_k_indices(r, month, k) for r in runs]
        vals = [_jaccard_indices(tops[i], tops[j]) for i, j in itertools.combinations(range(len(runs)), 2)]
        out[month] = math.fsum(vals) / len(vals)
    return out


def jaccard_topk(run_set: RunSet, k: int) -> tuple[float, float]:
    """``(mean, std)`` over months of the pairwise top-K Jaccard index."""
    per_month = list(jaccard_by_month(run_set, k).values())
    if not per_month:
        return math.nan, math.nan
    return float(np.mean(per_month)), float(np.std(per_month))


def pairwise_taus(run_set: RunSet, per_month=False) -> list[tuple[str, str, float, float]]:
    """``(run_a, run_b, tau, weighted_tau)`` for every run pair.

    With ``per_month`` the taus are computed inside each month and averaged
    over months; otherwise on all aligned predictions at once.
    """
    run_set.require(2)
    scores = [ranking_scores(r) for r in run_set]
    groups = list(run_set.reference.month_groups().values()) if per_month else [slice(None)]
    out = []
    for i, j in itertools.combinations(range(run_set.n), 2):
        vals = [_taus(scores[i][g], scores[j][g]) for g in groups]
        tau = math.fsum(v[0] for v in vals) / len(vals)
        tau_w = math.fsum(v[1] for v in vals) / len(vals)
        out.append((run_set.runs[i].run_id, run_set.runs[j].run_id, tau, tau_w))
    return out


@dataclass
class AucSummary:
    run_ids: list
    roc_auc: list
    pr_auc: list
    roc_auc_mean: float
    pr_auc_mean: float
    roc_auc_std: float
    pr_auc_std: float
    excluded_roc: list = field(default_factory=list)
    excluded_pr: list = field(default_factory=list)


def _mean_std(values, ids):
    kept = [v for v in values if not math.isnan(v)]
    excluded = [i for v, i in zip(values, ids) if math.isnan(v)]
    mean = float(np.mean(kept)) if kept else math.nan
    std = float(np.std(kept, ddof=1)) if len(kept) >= 2 else math.nan
    return mean, std, excluded


def auc_summary(run_set: RunSet) -> AucSummary:
    ids = run_set.run_ids
    metrics = [aggregated_metrics(r) for r in run_set]
    roc = [m["roc_auc"] for m in metrics]
    pr = [m["pr_auc"] for m in metrics]
    roc_mean, roc_std, ex_roc = _mean_std(roc, ids)
    pr_mean, pr_std, ex_pr = _mean_std(pr, ids)
    if ex_roc or ex_pr:
        log.warning("runs with undefined AUC excluded: roc=%s pr=%s", ex_roc, ex_pr)
    return AucSummary(ids, roc, pr, roc_mean, pr_mean, roc_std, pr_std, ex_roc, ex_pr)


def auc_dispersion(run_set: RunSet) -> tuple[float, float]:
    """Sample standard deviation (divisor N-1) of per-run ROC-AUC and PR-AUC."""
    run_set.require(2)
    s = auc_summary(run_set)
    return s.roc_auc_std, s.pr_auc_std


@dataclass
class StabilityReport:
    run_ids: list
    aucs: AucSummary
    jaccard_curve: dict  # k -> (mean, std over months)
    tau_pairs: list
    tau_per_month: bool = False

    @property
    def roc_auc_std(self):
        return self.aucs.roc_auc_std

    @property
    def pr_auc_std(self):
        return self.aucs.pr_auc_std

    def _tau_stats(self, col):
        vals = [p[col] for p in self.tau_pairs]
        return float(np.mean(vals)), float(np.std(vals))

    @property
    def tau_unweighted(self):
        return self._tau_stats(2)

    @property
    def tau_weighted(self):
        return self._tau_stats(3)

    def to_dict(self) -> dict:
        a = self.aucs
        return {
            "n_runs": len(self.run_ids),
            "run_ids": list(self.run_ids),
            "auc": {
                "per_run": [
                    {"run_id": r, "roc_auc": _num(x), "pr_auc": _num(y)}
                    for r, x, y in zip(a.run_ids, a.roc_auc, a.pr_auc)
                ],
                "roc_auc_mean": _num(a.roc_auc_mean),
                "pr_auc_mean": _num(a.pr_auc_mean),
                "roc_auc_std": _num(a.roc_auc_std),
                "pr_auc_std": _num(a.pr_auc_std),
                "excluded_runs": {"roc_auc": a.excluded_roc, "pr_auc": a.excluded_pr},
            },
            "jaccard": [
                {"k": int(k), "mean": _num(m), "std_over_months": _num(s)}
                for k, (m, s) in sorted(self.jaccard_curve.items())
            ],
            "kendall_tau": {
                "grouping": "per_month" if self.tau_per_month else "all_predictions",
                "std_over": "run_pairs",
                "unweighted": {"mean": self.tau_unweighted[0], "std": self.tau_unweighted[1]},
                "weighted": {"mean": self.tau_weighted[0], "std": self.tau_weighted[1]},
            },
        }


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def stability_report(run_set: RunSet, k_grid, per_month_tau=False) -> StabilityReport:
    run_set.require(2)
    curve = {int(k): jaccard_topk(run_set, int(k)) for k in k_grid}
    return StabilityReport(
        run_set.run_ids,
        auc_summary(run_set),
        curve,
        pairwise_taus(run_set, per_month_tau),
        per_month_tau,
    )


def jaccard_curve_rows(report: StabilityReport, family: str) -> list[dict]:
    return [
        {"family": family, "k": k, "mean": m, "std_over_months": s}
        for k, (m, s) in sorted(report.jaccard_curve.items())
    ]


def risk_scatter_rows(run_set: RunSet, run_a=None, run_b=None) -> list[dict]:
    """Per-key calibrated risk of two runs, for a pairwise comparison plot."""
    run_set.require(2)
    a = run_set[run_a] if run_a else run_set.runs[0]
    b = run_set[run_b] if run_b else run_set.runs[1]
    field_a = a.calibrated_risk if a.is_calibrated else a.raw_score
    field_b = b.calibrated_risk if b.is_calibrated else b.raw_score
    return [
        {
            "patient_id": p,
            "month": index_to_month(m),
            "run_a": a.run_id,
            "run_b": b.run_id,
            "risk_a": float(x),
            "risk_b": float(y),
        }
        for p, m, x, y in zip(a.patient_ids, a.months, field_a, field_b)
    ]
