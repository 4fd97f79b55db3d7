import csv
import math
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aspectrec.evaluation import (GradedLabelSet, accuracy, chronological_bins, comparison_rows,
                                  format_table, ndcg_at_k, paired_pvalue, per_query_metrics,
                                  recall_at_k, rolling_cv, split_train_test_by_month, stars,
                                  weighted_f1, write_comparison_csv)
from aspectrec.pipeline import SignalTable, classification_cv
from aspectrec.ranker import RankedList

grade_lists = st.lists(st.integers(0, 3), min_size=1, max_size=12)


def _labels(grades):
    names = [f"a{i:02d}" for i in range(len(grades))]
    return names, dict(zip(names, grades))


# -- metrics ------------------------------------------------------------------

def test_ndcg_hand_example():
    names, lab = _labels([2, 3])
    dcg = 3 + 7 / math.log2(3)
    idcg = 7 + 3 / math.log2(3)
    assert dcg == pytest.approx(7.4165, abs=1e-4) and idcg == pytest.approx(8.8928, abs=1e-4)
    assert ndcg_at_k(names, lab, 2) == pytest.approx(0.8340, abs=1e-4)


def test_ndcg_trivial_cases():
    names, lab = _labels([3, 2, 1, 0])
    assert ndcg_at_k(names, lab, 3) == 1.0
    names, lab = _labels([1, 0, 1])
    assert ndcg_at_k(names, lab, 3) == 0.0
    with pytest.raises(ValueError):
        ndcg_at_k(names, lab, 0)


def test_ndcg_accepts_ranked_list_and_unknown_aspects():
    r = RankedList.from_scores([("x", 3.0), ("y", 2.0), ("z", 1.0)])
    # "x" is unlabeled and so grade 0
    assert ndcg_at_k(r, {"y": 3, "z": 2}, 3) == pytest.approx(
        (7 / math.log2(3) + 3 / 2) / (7 + 3 / math.log2(3)))


def test_recall_cases():
    names, lab = _labels([3, 2, 1, 0, 2, 3])
    assert recall_at_k(names, lab, 3) == 0.5
    assert recall_at_k(names, lab, 6) == 1.0
    names, lab = _labels([1, 1])
    assert recall_at_k(names, lab, 2) == 0.0


@settings(max_examples=100, deadline=None)
@given(grade_lists, st.integers(1, 12))
def test_metric_ranges(grades, k):
    names, lab = _labels(grades)
    assert 0.0 <= ndcg_at_k(names, lab, k) <= 1.0 + 1e-12
    assert 0.0 <= recall_at_k(names, lab, k) <= 1.0


@settings(max_examples=100, deadline=None)
@given(grade_lists, st.integers(1, 12))
def test_ndcg_is_one_iff_gain_sorted(grades, k):
    names, lab = _labels(grades)
    gain = [{0: 0, 1: 0, 2: 3, 3: 7}[g] for g in grades]
    sorted_prefix = all(gain[i] >= gain[i + 1] for i in range(len(gain) - 1))
    ideal = ndcg_at_k(names, lab, len(names)) == pytest.approx(1.0)
    if any(gain):
        assert ideal == sorted_prefix
    # the grade-sorted reordering always attains 1 when anything is relevant
    order = sorted(names, key=lambda a: -{0: 0, 1: 0, 2: 3, 3: 7}[lab[a]])
    assert ndcg_at_k(order, lab, k) == pytest.approx(1.0 if any(gain) else 0.0)


@settings(max_examples=100, deadline=None)
@given(grade_lists)
def test_recall_monotone_in_k(grades):
    names, lab = _labels(grades)
    vals = [recall_at_k(names, lab, k) for k in range(1, len(names) + 1)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


# -- labels -------------------------------------------------------------------

def test_label_set_validation_and_round_trip(tmp_path):
    labels = GradedLabelSet()
    labels.set("e", "e results", "before", 1)
    labels.set("e", "e results", "during", 3)
    with pytest.raises(ValueError):
        labels.set("e", "x", "later", 2)
    with pytest.raises(ValueError):
        labels.set("e", "x", "before", 4)
    labels.save(tmp_path / "labels.csv")
    back = GradedLabelSet.load(tmp_path / "labels.csv")
    assert back.for_query("e", "during") == {"e results": 3}
    assert back.for_query("e", "after") == {"e results": 0}
    with open(tmp_path / "labels.csv") as fh:
        assert next(csv.reader(fh)) == ["entity", "aspect", "before_grade", "during_grade",
                                        "after_grade"]


# -- protocols ----------------------------------------------------------------

D0 = date(2006, 3, 1)


def test_rolling_cv_single_entity_bins():
    items = [(f"e{i}", D0 + timedelta(days=i)) for i in range(10)]
    trials = rolling_cv(items)
    assert [t.test_bin for t in trials] == [7, 8, 9, 10]
    assert all(len(t.test) == 1 for t in trials)
    assert trials[-1].train == [f"e{i}" for i in range(9)]


def test_rolling_cv_needs_enough_entities():
    with pytest.raises(ValueError):
        rolling_cv([("e", D0)] * 5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=10, max_size=80))
def test_rolling_cv_never_leaks(offsets):
    items = [(f"e{i}", D0 + timedelta(days=o)) for i, o in enumerate(offsets)]
    day = dict(items)
    for t in rolling_cv(items):
        assert max(day[k] for k in t.train) < min(day[k] for k in t.test)
    bins = chronological_bins(items)
    assert sum(len(b) for b in bins) == len(items)


def test_split_by_month():
    items = [("a", date(2006, 3, 5)), ("b", date(2006, 4, 30)), ("c", date(2006, 5, 1)),
             ("d", date(2006, 5, 20))]
    train, test = split_train_test_by_month(items)
    assert train == ["a", "b"] and test == ["c", "d"]
    assert len(train) + len(test) == len(items)


def test_classification_cv_mean_row_is_trial_mean():
    rng = np.random.default_rng(0)
    keys, types, periods, days, X = [], [], [], [], []
    for i in range(30):
        typ = "anticipated" if i % 2 else "breaking"
        for j, p in enumerate(("before", "during", "after")):
            keys.append((f"e{i:02d}", p))
            types.append(typ)
            periods.append(p)
            days.append(D0 + timedelta(days=i))
            X.append([2.0 * (i % 2) + rng.normal(0, 0.3), 2.0 * j + rng.normal(0, 0.3), rng.normal()])
    sig = SignalTable(keys, types, periods, days, np.array(X))
    rows = classification_cv(sig, [(f"e{i:02d}", D0 + timedelta(days=i)) for i in range(30)])
    trials, mean = rows[:-1], rows[-1]
    assert mean["bin"] == "mean" and len(trials) == 4
    for k in ("type_accuracy", "cascaded_f1", "logistic_accuracy"):
        assert mean[k] == pytest.approx(np.mean([r[k] for r in trials]))
    assert mean["type_accuracy"] > 0.9


def test_accuracy_and_weighted_f1():
    y = ["a", "a", "a", "b"]
    p = ["a", "a", "b", "b"]
    assert accuracy(y, p) == 0.75
    # F1(a) = 0.8 with support 3, F1(b) = 2/3 with support 1
    assert weighted_f1(y, p) == pytest.approx((0.8 * 3 + 2 / 3) / 4)
    assert math.isnan(accuracy([], []))


def test_paired_pvalue():
    assert paired_pvalue([1, 2, 3], [1, 2, 3]) == 1.0
    a = np.array([0.9, 0.8, 0.85, 0.95, 0.9, 0.88])
    b = a - np.array([0.3, 0.25, 0.35, 0.3, 0.28, 0.32])
    assert paired_pvalue(a, b) < 0.01
    assert [stars(x) for x in (0.005, 0.03, 0.07, 0.5)] == ["***", "**", "*", ""]


def test_report_rows_and_table(tmp_path):
    labels = GradedLabelSet()
    for e in ("e1", "e2"):
        labels.set(e, "good", "during", 3)
        labels.set(e, "ok", "during", 2)
        labels.set(e, "bad", "during", 1)
    queries = [("e1", "d", "during"), ("e2", "d", "during")]
    best = RankedList.from_scores([("good", 3), ("ok", 2), ("bad", 1), ("unlabeled", 9)])
    worst = RankedList.from_scores([("bad", 3), ("ok", 2), ("good", 1)])
    runs = {"RWR": {("e1", "d"): worst, ("e2", "d"): worst},
            "Ours": {("e1", "d"): best, ("e2", "d"): best}}
    pq = per_query_metrics(runs, labels, queries)
    assert pq["Ours"]["ndcg@3"] == [1.0, 1.0]
    rows = comparison_rows(pq)
    ours = next(r for r in rows if r["method"] == "Ours")
    base = next(r for r in rows if r["method"] == "RWR")
    assert ours["ndcg@3_delta"] == pytest.approx((1.0 - base["ndcg@3"]) / base["ndcg@3"] * 100)
    write_comparison_csv(tmp_path / "t.csv", rows)
    assert (tmp_path / "t.csv").read_text().startswith("method,ndcg@3,ndcg@3_delta,ndcg@3_p")
    text = format_table(rows, title="Test")
    assert text.splitlines()[0] == "Test" and "Ours" in text and "%" in text
