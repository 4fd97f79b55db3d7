"""Ranking metrics, chronological evaluation protocols and report tables."""

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

PERIODS = ("before", "during", "after")
GAIN = {0: 0.0, 1: 0.0, 2: 3.0, 3: 7.0}
RELEVANT = 2


def _aspects(ranked):
    if hasattr(ranked, "aspects"):
        return ranked.aspects
    return [a if isinstance(a, str) else a[0] for a in ranked]


def dcg(grades, k):
    return sum(GAIN[g] / math.log2(r + 2) for r, g in enumerate(grades[:k]))


def ndcg_at_k(ranked, labels, k):
    """NDCG with gains 0/0/3/7 for grades 0..3; IDCG over the same candidates.

    Aspects missing from ``labels`` count as grade 0.
    """
    if k < 1:
        raise ValueError("k must be positive")
    grades = [int(labels.get(a, 0)) for a in _aspects(ranked)]
    ideal = dcg(sorted(grades, reverse=True), k)
    if ideal == 0:
        return 0.0
    return dcg(grades, k) / ideal


def recall_at_k(ranked, labels, k):
    """Share of relevant (grade >= 2) candidates that appear in the top k."""
    if k < 1:
        raise ValueError("k must be positive")
    grades = [int(labels.get(a, 0)) for a in _aspects(ranked)]
    total = sum(g >= RELEVANT for g in grades)
    if total == 0:
        return 0.0
    return sum(g >= RELEVANT for g in grades[:k]) / total


class GradedLabelSet:
    """(entity, aspect, period) -> grade in 0..3."""

    def __init__(self, grades=None):
        self.grades = {}
        for key, g in (grades or {}).items():
            self.set(*key, g)

    def set(self, entity, aspect, period, grade):
        if period not in PERIODS:
            raise ValueError(f"unknown period {period!r}")
        if int(grade) not in GAIN:
            raise ValueError(f"grade {grade} outside 0..3")
        self.grades[(entity, aspect, period)] = int(grade)

    def for_query(self, entity, period):
        return {a: g for (e, a, p), g in self.grades.items() if e == entity and p == period}

    def entities(self):
        return sorted({e for e, _, _ in self.grades})

    @classmethod
    def load(cls, path):
        out = cls()
        with open(path, encoding="utf-8", newline="") as fh:
            for rec in csv.DictReader(fh):
                for p in PERIODS:
                    out.set(rec["entity"], rec["aspect"], p, int(rec[f"{p}_grade"]))
        return out

    def save(self, path):
        keys = sorted({(e, a) for e, a, _ in self.grades})
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["entity", "aspect"] + [f"{p}_grade" for p in PERIODS])
            for e, a in keys:
                w.writerow([e, a] + [self.grades.get((e, a, p), 0) for p in PERIODS])


@dataclass
class Trial:
    test_bin: int
    train: list
    test: list


def chronological_bins(items, n_bins=10):
    """Split (key, day) items into ``n_bins`` chronological bins.

    Items sharing a day never straddle a bin boundary, so a later bin never
    holds an earlier day than a previous one.
    """
    items = sorted(items, key=lambda kv: (kv[1], kv[0]))
    n = len(items)
    if n < n_bins:
        raise ValueError(f"need at least {n_bins} entities for {n_bins} bins, got {n}")
    cuts = [round(i * n / n_bins) for i in range(n_bins + 1)]
    for i in range(1, n_bins):
        c = max(cuts[i], cuts[i - 1])
        while 0 < c < n and items[c][1] == items[c - 1][1]:
            c += 1
        cuts[i] = c
    return [items[cuts[i]: cuts[i + 1]] for i in range(n_bins)]


def rolling_cv(items, n_bins=10, test_bins=4):
    """Trials that test each of the last ``test_bins`` bins on all earlier bins."""
    bins = chronological_bins(items, n_bins)
    trials = []
    for b in range(n_bins - test_bins, n_bins):
        train = [k for chunk in bins[:b] for k, _ in chunk]
        test = [k for k, _ in bins[b]]
        if not test or not train:
            logger.warning("rolling bin %d is empty after tie handling; skipped", b + 1)
            continue
        trials.append(Trial(b + 1, train, test))
    return trials


def split_train_test_by_month(items):
    """Entities whose event day falls in the last month of the data are the test set."""
    if not items:
        return [], []
    last = max((d.year, d.month) for _, d in items)
    train = [k for k, d in items if (d.year, d.month) < last]
    test = [k for k, d in items if (d.year, d.month) == last]
    return train, test


def accuracy(y_true, y_pred):
    y_true, y_pred = list(y_true), list(y_pred)
    if not y_true:
        return float("nan")
    return sum(a == b for a, b in zip(y_true, y_pred)) / len(y_true)


def weighted_f1(y_true, y_pred):
    """Support-weighted mean of per-class F1 over the classes present in ``y_true``."""
    y_true, y_pred = list(y_true), list(y_pred)
    if not y_true:
        return float("nan")
    total = 0.0
    for c in sorted(set(y_true)):
        tp = sum(t == c and p == c for t, p in zip(y_true, y_pred))
        fp = sum(t != c and p == c for t, p in zip(y_true, y_pred))
        fn = sum(t == c and p != c for t, p in zip(y_true, y_pred))
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        total += f1 * sum(t == c for t in y_true)
    return total / len(y_true)


def paired_pvalue(a, b):
    """Two-sided paired t-test; 1.0 when the differences carry no information."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    diff = a - b
    if len(diff) < 2 or np.allclose(diff, diff[0]):
        return 1.0
    return float(stats.ttest_rel(a, b).pvalue)


def stars(p):
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


METRICS = (("ndcg@3", ndcg_at_k, 3), ("ndcg@10", ndcg_at_k, 10),
           ("recall@3", recall_at_k, 3), ("recall@10", recall_at_k, 10))


def per_query_metrics(runs, labels, queries):
    """{method: {metric: [value per query]}} over a fixed query order.

    ``runs`` maps method -> {(entity, day): RankedList}; ``queries`` lists
    (entity, day, period). Rankings are restricted to labeled aspects.
    """
    out = {}
    for method, run in runs.items():
        vals = {name: [] for name, _, _ in METRICS}
        for entity, day, period in queries:
            lab = labels.for_query(entity, period)
            ranked = [a for a in _aspects(run.get((entity, day), [])) if a in lab]
            for name, fn, k in METRICS:
                vals[name].append(fn(ranked, lab, k))
        out[method] = vals
    return out


def comparison_rows(per_query, baseline="RWR"):
    """Mean metric per method with relative change and p-value against ``baseline``."""
    rows = []
    base = per_query[baseline]
    for method, vals in per_query.items():
        row = {"method": method}
        for name, _, _ in METRICS:
            m = float(np.mean(vals[name])) if vals[name] else float("nan")
            b = float(np.mean(base[name])) if base[name] else float("nan")
            row[name] = m
            row[name + "_delta"] = (m - b) / b * 100 if b else float("nan")
            row[name + "_p"] = paired_pvalue(vals[name], base[name]) if method != baseline else 1.0
        rows.append(row)
    return rows


def write_comparison_csv(path, rows):
    cols = ["method"]
    for name, _, _ in METRICS:
        cols += [name, name + "_delta", name + "_p"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["method"]] + [f"{r[c]:.6f}" for c in cols[1:]])


def format_table(rows, baseline="RWR", title=None):
    """Plain-text table: metric value, percent change vs baseline, significance stars."""
    names = [n for n, _, _ in METRICS]
    width = max(len(r["method"]) for r in rows) + 2
    lines = []
    if title:
        lines.append(title)
    lines.append("Method".ljust(width) + "".join(n.rjust(22) for n in names))
    for r in rows:
        cells = []
        for n in names:
            if r["method"] == baseline:
                cells.append(f"{r[n]:.4f}".rjust(22))
            else:
                txt = f"{r[n]:.4f} ({r[n + '_delta']:+.1f}%){stars(r[n + '_p'])}"
                cells.append(txt.rjust(22))
        lines.append(r["method"].ljust(width) + "".join(cells))
    lines.append("* p<0.1, ** p<0.05, *** p<0.01 (paired t-test vs " + baseline + ")")
    return "\n".join(lines) + "\n"
