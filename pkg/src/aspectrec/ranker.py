"""Probability-weighted pairwise ranking models, ensemble scoring and QAC baselines."""

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np
from numba import njit

from .signals import holt_winters_fit_forecast

logger = logging.getLogger(__name__)

MODEL_FORMAT = "aspectrec.ranker"
MODEL_VERSION = 1
N_CELLS = 6


@dataclass(frozen=True)
class PairwisePreference:
    """Row ``i`` should rank above row ``j`` for the same (entity, day)."""

    entity: str
    day: int
    i: int
    j: int

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("a preference needs two distinct aspects")


def make_preferences(groups):
    """Pairs from graded rows.

    ``groups`` maps (entity, day) to [(row, grade)]. Grade 0 rows are
    dropped; every strictly higher grade is preferred over every lower one.
    """
    prefs = []
    for (entity, day) in sorted(groups):
        rows = [(r, g) for r, g in groups[(entity, day)] if g > 0]
        for r_i, g_i in rows:
            for r_j, g_j in rows:
                if g_i > g_j:
                    prefs.append(PairwisePreference(entity, day, r_i, r_j))
    return prefs


@dataclass
class FeatureScaler:
    """z-score fitted on training rows; constant columns dropped."""

    names: tuple
    mean: np.ndarray
    std: np.ndarray
    keep: np.ndarray

    @classmethod
    def fit(cls, X, names):
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        keep = std > 1e-12
        return cls(tuple(names), mean, np.where(keep, std, 1.0), keep)

    @property
    def kept_names(self):
        return tuple(n for n, k in zip(self.names, self.keep) if k)

    def transform(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.names):
            raise ValueError(f"expected {len(self.names)} features, got {X.shape[1]}")
        return ((X - self.mean) / self.std)[:, self.keep]

    def to_json(self):
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist(),
                "keep": self.keep.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["names"]), np.array(d["mean"]), np.array(d["std"]),
                   np.array(d["keep"], dtype=bool))


@njit(cache=True)
def _sgd(P, D, lam, eta0, epochs, order, W, avg, hist):
    """Averaged stochastic subgradient on lam/2 ||W||^2 + mean hinge(1 - p^T W d)."""
    n, k = P.shape
    d = D.shape[1]
    t = 0
    n_avg = 0
    for ep in range(epochs):
        for r in range(n):
            i = order[ep, r]
            t += 1
            eta = eta0 / (1.0 + lam * t)
            m = 0.0
            for a in range(k):
                if P[i, a] != 0.0:
                    s = 0.0
                    for b in range(d):
                        s += W[a, b] * D[i, b]
                    m += P[i, a] * s
            shrink = 1.0 - eta * lam
            for a in range(k):
                for b in range(d):
                    W[a, b] *= shrink
            if m < 1.0:
                for a in range(k):
                    if P[i, a] != 0.0:
                        g = eta * P[i, a]
                        for b in range(d):
                            W[a, b] += g * D[i, b]
            if ep > 0:
                n_avg += 1
                inv = 1.0 / n_avg
                for a in range(k):
                    for b in range(d):
                        avg[a, b] += (W[a, b] - avg[a, b]) * inv
        if ep == 0:
            for a in range(k):
                for b in range(d):
                    avg[a, b] = W[a, b]
        for a in range(k):
            for b in range(d):
                hist[ep, a, b] = avg[a, b]


def pairwise_objective(W, P, D, C):
    """0.5 * sum ||w_k||^2 + C * sum hinge(1 - sum_k p_k w_k^T d)."""
    margins = np.einsum("nk,kd,nd->n", P, W, D)
    return float(0.5 * (W ** 2).sum() + C * np.maximum(0.0, 1.0 - margins).sum())


@dataclass
class PairwiseFit:
    W: np.ndarray
    objective: float
    history: list  # objective of the averaged iterate after each epoch


def fit_pairwise(P, D, C=20.0, epochs=50, eta0=0.1, seed=42):
    """Minimize the probability-weighted pairwise hinge objective.

    ``P`` (pairs x cells) holds the cell weights of each pair's (entity, day)
    and ``D`` (pairs x features) the feature differences x_i - x_j.
    """
    P = np.ascontiguousarray(P, dtype=float)
    D = np.ascontiguousarray(D, dtype=float)
    n = len(D)
    if n == 0:
        raise ValueError("empty preference set")
    bad = np.flatnonzero(~np.isfinite(D).all(axis=1))
    if len(bad):
        raise ValueError(f"NaN feature in preference row {int(bad[0])}")
    if C < 0:
        raise ValueError("C must be non-negative")
    k, d = P.shape[1], D.shape[1]
    if C == 0:
        W = np.zeros((k, d))
        return PairwiseFit(W, 0.0, [0.0] * epochs)
    lam = 1.0 / (C * n)
    rng = np.random.default_rng(seed)
    order = np.array([rng.permutation(n) for _ in range(epochs)], dtype=np.int64)
    W = np.zeros((k, d))
    avg = np.zeros((k, d))
    hist = np.zeros((epochs, k, d))
    _sgd(P, D, lam, eta0, epochs, order, W, avg, hist)
    history = [pairwise_objective(h, P, D, C) for h in hist]
    return PairwiseFit(avg.copy(), history[-1], history)


@dataclass
class ModelSet:
    scaler: FeatureScaler
    weights: np.ndarray  # (6, kept features); a single model has one row
    C: float
    seed: int
    objective: float = float("nan")
    history: list = field(default_factory=list)

    @property
    def dim(self):
        return self.weights.shape[1]

    def score_raw(self, X, dist=None):
        """Scores of raw feature rows; ``dist`` is required for a six-cell set."""
        Z = self.scaler.transform(X)
        if len(self.weights) == 1:
            # row-wise products keep scores independent of row position (BLAS is not)
            return (Z * self.weights[0]).sum(axis=1)
        return np.array([ensemble_score(self, z, dist) for z in Z])

    def to_json(self):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "standardization": self.scaler.to_json(),
            "omega": self.weights.tolist(),
            "C": self.C,
            "seed": self.seed,
            "objective": self.objective,
        }

    @classmethod
    def from_json(cls, d):
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError("not a ranking model file of a supported version")
        return cls(FeatureScaler.from_json(d["standardization"]), np.array(d["omega"], dtype=float),
                   d["C"], d["seed"], d["objective"])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _probs(dist):
    p = getattr(dist, "probs", dist)
    return np.asarray(p, dtype=float)


def ensemble_score(models, x, dist):
    """sum_kl P(T_l, C_k | e, t) * w_kl^T x for a vector already in model space."""
    W = models.weights if isinstance(models, ModelSet) else np.asarray(models, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape != (W.shape[1],):
        raise ValueError(f"feature dimension {x.shape} does not match model dimension {W.shape[1]}")
    p = _probs(dist)
    if p.shape != (W.shape[0],):
        raise ValueError("distribution length does not match the number of models")
    return float((p * (W * x).sum(axis=1)).sum())


def _pair_arrays(prefs, Z, dists):
    """Difference rows and cell weights for each preference."""
    D = np.array([Z[p.i] - Z[p.j] for p in prefs], dtype=float).reshape(len(prefs), Z.shape[1])
    if dists is None:
        P = np.ones((len(prefs), 1))
    else:
        missing = [(p.entity, p.day) for p in prefs if (p.entity, p.day) not in dists]
        if missing:
            raise ValueError(f"no time/type distribution for {missing[0]}")
        P = np.array([_probs(dists[(p.entity, p.day)]) for p in prefs], dtype=float)
    return P, D


def train_ensemble(prefs, X, dists, names, C=20.0, epochs=50, seed=42, eta0=0.1, scaler=None):
    """Six time/type models trained jointly under the weighted pairwise objective.

    ``X`` holds raw feature rows referenced by the preferences and
    ``dists`` maps (entity, day) to a TimeTypeDistribution.
    """
    if not prefs:
        raise ValueError("empty preference set")
    X = np.asarray(X, dtype=float)
    bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if len(bad):
        raise ValueError(f"NaN feature in row {int(bad[0])}")
    scaler = scaler or FeatureScaler.fit(X, names)
    P, D = _pair_arrays(prefs, scaler.transform(X), dists)
    fit = fit_pairwise(P, D, C, epochs, eta0, seed)
    return ModelSet(scaler, fit.W, C, seed, fit.objective, fit.history)


def train_single(prefs, X, names, subset, C=20.0, epochs=50, seed=42, eta0=0.1):
    """Standard pairwise hinge ranker on the feature columns named in ``subset``."""
    subset = [n for n in names if n in set(subset)]
    if not subset:
        raise ValueError("empty feature mask")
    if not prefs:
        raise ValueError("empty preference set")
    cols = [list(names).index(n) for n in subset]
    Xs = np.asarray(X, dtype=float)[:, cols]
    bad = np.flatnonzero(~np.isfinite(Xs).all(axis=1))
    if len(bad):
        raise ValueError(f"NaN feature in row {int(bad[0])}")
    scaler = FeatureScaler.fit(Xs, subset)
    P, D = _pair_arrays(prefs, scaler.transform(Xs), None)
    fit = fit_pairwise(P, D, C, epochs, eta0, seed)
    return ModelSet(scaler, fit.W, C, seed, fit.objective, fit.history)


def pairwise_accuracy(scores, prefs):
    if not prefs:
        return float("nan")
    s = np.asarray(scores, dtype=float)
    return float(np.mean([s[p.i] > s[p.j] for p in prefs]))


# -- ranked lists -----------------------------------------------------------

@dataclass
class RankedList:
    items: list  # [(aspect, score)] descending
    flags: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores, flags=None):
        seen = {}
        for a, s in scores:
            if a not in seen:
                seen[a] = float(s)
        items = sorted(seen.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(items, dict(flags or {}))

    @property
    def aspects(self):
        return [a for a, _ in self.items]

    def __len__(self):
        return len(self.items)


def rank(models, entity, t, candidates, dist=None):
    """Order (aspect, raw feature vector) candidates by ensemble score."""
    if not candidates:
        return RankedList([])
    X = np.array([x for _, x in candidates], dtype=float)
    scores = models.score_raw(X, dist)
    return RankedList.from_scores(zip([a for a, _ in candidates], scores))


def baseline_rwr(candidates):
    """``candidates``: [(query, rwr score)]."""
    return RankedList.from_scores(candidates)


def _history(index, query, t):
    return index.daily(query)[: t + 1]


def baseline_mle(candidates, index, t):
    """Rank by query frequency from log start to day offset t."""
    return RankedList.from_scores((q, _history(index, q, t).sum()) for q in candidates)


def baseline_mle_w(candidates, index, t, W=10):
    """Rank by query frequency within [t - W + 1, t]."""
    if W < 1:
        raise ValueError("window must be at least one day")
    lo = max(0, t - W + 1)
    return RankedList.from_scores((q, _history(index, q, t)[lo:].sum()) for q in candidates)


def baseline_lnq(candidates, index, t, aliases, N=200):
    """Rank by matches among the last N entity queries issued by the end of day t."""
    if N < 1:
        raise ValueError("N must be positive")
    cutoff = datetime.combine(index.day(t) + timedelta(days=1), datetime.min.time())
    cutoff = int((cutoff - datetime(1970, 1, 1)).total_seconds())
    events = []
    for qid in index.matching_queries(tuple(aliases)):
        q = index.queries[qid]
        ts = index.times(q)
        for s in ts[ts < cutoff]:
            events.append((int(s), q))
    events.sort()
    recent = events[-N:]
    counts = {}
    for _, q in recent:
        counts[q] = counts.get(q, 0) + 1
    return RankedList.from_scores((q, counts.get(q, 0)) for q in candidates)


def baseline_pnq(candidates, index, t, period=7, W=10):
    """Rank by a one-step Holt-Winters forecast of each candidate's daily volume.

    Candidates with less than two periods of history fall back to their
    MLE-W score; those are listed in ``flags["fallback"]``.
    """
    scores, fallback = [], []
    mlew = dict(baseline_mle_w(candidates, index, t, W).items)
    for q in candidates:
        y = _history(index, q, t)
        if len(y) < 2 * period:
            scores.append((q, mlew[q]))
            fallback.append(q)
            continue
        fc = holt_winters_fit_forecast(y, period=period, horizon=1).forecast[0]
        scores.append((q, fc))
    return RankedList.from_scores(scores, {"fallback": sorted(fallback)})


def write_run(path, rows, tag):
    """TREC-style run lines: entity, day, aspect, rank, score, tag."""
    with open(path, "w", encoding="utf-8") as fh:
        for entity, day, ranked in rows:
            for r, (aspect, score) in enumerate(ranked.items, 1):
                fh.write(f"{entity}\t{day}\t{aspect}\t{r}\t{score:.10g}\t{tag}\n")


def read_run(path):
    """{(entity, day): RankedList} from a run file written by ``write_run``."""
    groups = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            entity, day, aspect, _, score, _ = line.rstrip("\n").split("\t")
            groups.setdefault((entity, day), []).append((aspect, float(score)))
    return {k: RankedList(v) for k, v in groups.items()}
