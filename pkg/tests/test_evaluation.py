from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from factories import make_run
from oracles import average_precision_oracle, roc_auc_oracle, top_k_oracle
from stabrisk.evaluation import (
    aggregated_metrics,
    evaluation_report,
    monthly_evaluate,
    pr_auc,
    ranking_scores,
    roc_auc,
    top_k,
)


@pytest.mark.trivial
def test_roc_perfect_separation():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


@pytest.mark.trivial
def test_roc_all_ties():
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_roc_hand_example():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc_oracle([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_roc_single_class_is_nan():
    assert math.isnan(roc_auc([0.1, 0.2], [1, 1]))
    assert math.isnan(roc_auc([0.1, 0.2], [0, 0]))


@pytest.mark.trivial
def test_pr_perfect_separation():
    assert pr_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


@pytest.mark.trivial
def test_pr_single_positive_first():
    assert pr_auc([0.9, 0.5, 0.4, 0.1, 0.05], [1, 0, 0, 0, 0]) == 1.0


def test_pr_hand_example():
    assert pr_auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-15)
    assert average_precision_oracle([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-15)


def test_pr_no_positive_is_nan():
    assert math.isnan(pr_auc([0.1, 0.2], [0, 0]))


def test_pr_ties_form_one_threshold():
    # both tied items enter together: precision 1/2 at recall 1
    assert pr_auc([0.5, 0.5], [1, 0]) == 0.5


def test_against_scikit_learn():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(5, 200))
        s = rng.integers(0, 20, n).astype(float)
        y = rng.integers(0, 2, n)
        if 0 < y.sum() < n:
            assert roc_auc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)
            assert pr_auc(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


def _two_month_run(scores_a, labels_a, scores_b, labels_b):
    n_a, n_b = len(scores_a), len(scores_b)
    return make_run(
        "r",
        list(scores_a) + list(scores_b),
        labels=list(labels_a) + list(labels_b),
        months=[120] * n_a + [121] * n_b,
        patients=[f"P{i:03d}" for i in range(n_a)] + [f"P{i:03d}" for i in range(n_b)],
    )


@pytest.mark.trivial
def test_single_month_average_equals_that_month():
    run = make_run("r", [0.1, 0.7, 0.4, 0.9], labels=[0, 1, 1, 0])
    ev = monthly_evaluate(run)
    assert ev.months == [120]
    assert ev.mean_roc_auc == ev.roc_auc[0] == roc_auc(run.raw_score, run.labels)
    assert ev.mean_pr_auc == ev.pr_auc[0]


@pytest.mark.trivial
def test_monthly_mean_of_one_and_half():
    run = _two_month_run([0.1, 0.9], [0, 1], [0.5, 0.5], [0, 1])
    ev = monthly_evaluate(run)
    assert ev.roc_auc == [1.0, 0.5]
    assert ev.mean_roc_auc == 0.75


@pytest.mark.trivial
def test_month_without_positives_excluded_from_pr_average():
    run = _two_month_run([0.1, 0.9], [0, 1], [0.3, 0.6], [0, 0])
    ev = monthly_evaluate(run)
    assert math.isnan(ev.pr_auc[1])
    assert ev.n_pr_months == 1
    assert ev.mean_pr_auc == ev.pr_auc[0] == 1.0
    assert ev.n_roc_months == 1


@pytest.mark.trivial
def test_top_k_larger_than_population():
    run = make_run("r", [0.2, 0.9, 0.5])
    assert top_k(run, 120, 10) == ["P0001", "P0002", "P0000"]


@pytest.mark.trivial
def test_top_k_tie_goes_to_lower_id():
    run = make_run("r", [0.9, 0.9, 0.1], patients=["P2", "P1", "P3"])
    assert top_k(run, 120, 1) == ["P1"]
    assert top_k(run, 120, 2) == ["P1", "P2"]


@pytest.mark.trivial
def test_top_k_direct_order():
    run = make_run("r", [0.9, 0.1, 0.5], patients=["A", "B", "C"])
    assert top_k(run, 120, 2) == ["A", "C"]


def test_top_k_unknown_month_and_bad_k():
    run = make_run("r", [0.9, 0.1])
    assert top_k(run, 5, 3) == []
    with pytest.raises(ValueError):
        top_k(run, 120, 0)


def test_top_k_uses_calibrated_risk_then_raw():
    run = make_run("r", [0.9, 0.1, 0.5], calibrated=[0.2, 0.8, 0.2], patients=["A", "B", "C"])
    # B has the highest calibrated risk; A and C share a step, raw score splits them
    assert top_k(run, 120, 3) == ["B", "A", "C"]
    assert aggregated_metrics(run)["roc_auc"] == roc_auc(ranking_scores(run), run.labels)


def test_report_schema():
    run = _two_month_run([0.1, 0.9], [0, 1], [0.3, 0.6], [0, 0])
    rep = evaluation_report(run, monthly=True, k=1)
    assert set(rep) == {"aggregated", "monthly"}
    assert set(rep["aggregated"]) == {"roc_auc", "pr_auc"}
    months = rep["monthly"]["months"]
    assert [m["month"] for m in months] == ["2019-01", "2019-02"]
    assert months[1]["pr_auc"] is None
    assert months[0]["top_k"] == ["P001"]


def test_empty_run_rejected():
    with pytest.raises(ValueError):
        monthly_evaluate(make_run("r", []))


labelled = st.integers(2, 60).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 8).map(float), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
    )
)


@settings(max_examples=150, deadline=None)
@given(labelled)
def test_metrics_equal_oracles(case):
    s, y = case
    expected = roc_auc_oracle(s, y)
    if expected is None:
        assert math.isnan(roc_auc(s, y))
    else:
        assert roc_auc(s, y) == float(expected)
    ap = average_precision_oracle(s, y)
    if ap is None:
        assert math.isnan(pr_auc(s, y))
    else:
        assert abs(pr_auc(s, y) - ap) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50, unique=True), st.data())
def test_roc_complement_without_ties(s, data):
    y = data.draw(st.lists(st.integers(0, 1), min_size=len(s), max_size=len(s)))
    if 0 < sum(y) < len(y):
        assert roc_auc(s, y) + roc_auc(-np.array(s), y) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5).map(float), min_size=1, max_size=30))
def test_top_k_is_prefix_stable_and_matches_oracle(s):
    run = make_run("r", s)
    full = top_k(run, 120, len(s))
    assert full == top_k_oracle(run.patient_ids.tolist(), run.raw_score.tolist(), len(s))
    for k in range(1, len(s) + 1):
        assert top_k(run, 120, k) == full[:k]
