"""Isotonic calibration of ranking scores by pool-adjacent-violators.

The fitted calibrator is a right-continuous step function: each block's value
applies from the block's smallest training score up to, but not including, the
next block's smallest score.  Inputs below the first knot take the first
value; inputs above the last knot take the last value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataError


@dataclass(frozen=True)
class IsotonicModel:
    knot_scores: np.ndarray
    knot_values: np.ndarray

    def __post_init__(self):
        ks = np.asarray(self.knot_scores, dtype=np.float64)
        kv = np.asarray(self.knot_values, dtype=np.float64)
        if ks.ndim != 1 or ks.shape != kv.shape or ks.size == 0:
            raise DataError("knot arrays must be non-empty, 1-D and equal length")
        if np.any(np.diff(ks) <= 0):
            raise DataError("knot scores must be strictly increasing")
        if np.any(np.diff(kv) < 0):
            raise DataError("knot values must be nondecreasing")
        if kv[0] < 0 or kv[-1] > 1:
            raise DataError("knot values must lie in [0, 1]")
        ks.setflags(write=False)
        kv.setflags(write=False)
        object.__setattr__(self, "knot_scores", ks)
        object.__setattr__(self, "knot_values", kv)

    def __call__(self, scores):
        return apply_isotonic(self, scores)


def pava(values, weights):
    """Weighted least-squares nondecreasing fit of ``values`` (already ordered).

    Returns ``(block_starts, block_values)``.  Adjacent blocks with equal means
    are merged, so block values are strictly increasing.
    """
    starts, sums, wsum = [], [], []
    for i, (v, w) in enumerate(zip(values, weights)):
        starts.append(i)
        sums.append(v * w)
        wsum.append(w)
        while len(sums) > 1 and sums[-2] / wsum[-2] >= sums[-1] / wsum[-1]:
            s, w_ = sums.pop(), wsum.pop()
            starts.pop()
            sums[-1] += s
            wsum[-1] += w_
    return np.array(starts, dtype=np.int64), np.array(sums) / np.array(wsum)


def fit_isotonic(scores, labels) -> IsotonicModel:
    """Least-squares isotonic fit of ``labels`` against ``scores``.

    Tied scores are first pooled into one point carrying their mean label and
    their multiplicity as weight.  ``labels`` may be any values in [0, 1]
    (binary outcomes in normal use; fitted values when refitting).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("fit_isotonic needs at least one example")
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    if (y < 0).any() or (y > 1).any():
        raise ValueError("labels must lie in [0, 1]")
    uniq, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    means = np.bincount(inverse, weights=y) / counts
    starts, values = pava(means.tolist(), counts.astype(np.float64).tolist())
    return IsotonicModel(uniq[starts], np.clip(values, 0.0, 1.0))


def apply_isotonic(model: IsotonicModel, scores):
    """Evaluate the step function; a scalar in gives a float out."""
    x = np.asarray(scores, dtype=np.float64)
    idx = np.searchsorted(model.knot_scores, x, side="right") - 1
    out = model.knot_values[np.clip(idx, 0, None)]
    return float(out) if np.ndim(out) == 0 else out


class IsotonicCalibrator(TransformerMixin, BaseEstimator):
    """Scikit-learn wrapper: ``fit(scores, labels)`` then ``transform(scores)``.

    Accepts scores as a 1-D array or a single-column 2-D array.
    """

    def fit(self, X, y):
        self.model_ = fit_isotonic(_as_scores(X), y)
        self.knot_scores_ = self.model_.knot_scores
        self.knot_values_ = self.model_.knot_values
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return apply_isotonic(self.model_, _as_scores(X))

    predict = transform


def _as_scores(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise DataError("calibrator expects a single score column")
        X = X[:, 0]
    return X


def save_isotonic(model: IsotonicModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("knot_score", "knot_value"))
        for s, v in zip(model.knot_scores, model.knot_values):
            w.writerow((format(s, ".17g"), format(v, ".17g")))
    return path


def load_isotonic(path) -> IsotonicModel:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["knot_score", "knot_value"]:
        raise DataError(f"{path}: expected header knot_score,knot_value")
    try:
        ks = [float(r[0]) for r in rows[1:]]
        kv = [float(r[1]) for r in rows[1:]]
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return IsotonicModel(np.array(ks), np.array(kv))
