"""Event type / time classification and ranking-sensitive soft assignment."""

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logsumexp, softmax

logger = logging.getLogger(__name__)

TYPES = ("breaking", "anticipated")
TIMES = ("before", "during", "after")
CELLS = tuple((c, t) for c in TYPES for t in TIMES)
MODEL_FORMAT = "aspectrec.eventclf"
MODEL_VERSION = 1


@dataclass(frozen=True)
class EventLabel:
    type: str
    time: str

    def __post_init__(self):
        if self.type not in TYPES:
            raise ValueError(f"unknown event type {self.type!r}")
        if self.time not in TIMES:
            raise ValueError(f"unknown event time {self.time!r}")

    @property
    def cell(self):
        return CELLS.index((self.type, self.time))


@dataclass
class Standardizer:
    """z-score with zero-variance columns dropped."""

    mean: np.ndarray
    std: np.ndarray
    keep: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        keep = std > 1e-12
        if not keep.all():
            logger.info("dropping %d zero-variance feature(s): %s", (~keep).sum(), np.flatnonzero(~keep).tolist())
        return cls(mean, np.where(keep, std, 1.0), keep)

    def transform(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.mean):
            raise ValueError(f"expected {len(self.mean)} features, got {X.shape[1]}")
        return ((X - self.mean) / self.std)[:, self.keep]

    def to_json(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "keep": self.keep.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]), np.array(d["keep"], dtype=bool))


@dataclass
class LinearClassifier:
    """Linear model over standardized features.

    ``kind`` is "hinge" (binary, one weight row, Platt-calibrated) or
    "softmax" (one row per class).
    """

    kind: str
    classes: tuple
    scaler: Standardizer
    weights: np.ndarray  # (rows, kept features)
    bias: np.ndarray
    calibration: tuple = (1.0, 0.0)  # Platt (A, B), hinge models only
    n_features: int = 0

    def decision(self, X):
        Z = self.scaler.transform(X)
        return Z @ self.weights.T + self.bias

    def predict_proba(self, X):
        f = self.decision(X)
        if self.kind == "hinge":
            a, b = self.calibration
            p1 = expit(-(a * f[:, 0] + b))
            return np.column_stack([1.0 - p1, p1])
        return softmax(f, axis=1)

    def predict(self, X):
        p = self.predict_proba(X)
        return [self.classes[i] for i in np.argmax(p, axis=1)]

    def to_json(self):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": self.kind,
            "classes": list(self.classes),
            "standardization": self.scaler.to_json(),
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "calibration": list(self.calibration),
            "n_features": self.n_features,
        }

    @classmethod
    def from_json(cls, d):
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError("not a classifier model file of a supported version")
        w = np.array(d["weights"], dtype=float).reshape(len(d["weights"]), -1)
        return cls(d["kind"], tuple(d["classes"]), Standardizer.from_json(d["standardization"]),
                   w, np.array(d["bias"], dtype=float), tuple(d["calibration"]), d["n_features"])


def _classes(y, expected=None):
    present = sorted(set(y), key=lambda c: (expected.index(c) if expected and c in expected else len(expected or ()), c))
    return tuple(present)


def _split_holdout(y, frac, rng):
    """Stratified index split; each class keeps at least one training row."""
    y = np.asarray(y)
    train, held = [], []
    for c in sorted(set(y.tolist())):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_hold = int(round(frac * len(idx)))
        n_hold = min(n_hold, len(idx) - 1)
        held.extend(idx[:n_hold])
        train.extend(idx[n_hold:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(held, dtype=int))


def _pegasos(Z, s, lam, epochs, rng):
    """Stochastic subgradient on the L2 hinge objective; bias as a constant column.

    Returns the average of the iterates visited after the first epoch.
    """
    n, d = Z.shape
    Za = np.hstack([Z, np.ones((n, 1))])
    w = np.zeros(d + 1)
    avg = np.zeros(d + 1)
    n_avg = 0
    t = 0
    for ep in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            margin = s[i] * (Za[i] @ w)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += eta * s[i] * Za[i]
            if ep > 0:
                n_avg += 1
                avg += (w - avg) / n_avg
    return avg if n_avg else w


def platt_fit(f, s):
    """Platt sigmoid ``P(y=+1|f) = 1 / (1 + exp(A f + B))`` with smoothed targets."""
    f = np.asarray(f, dtype=float)
    s = np.asarray(s)
    n_pos, n_neg = int((s > 0).sum()), int((s <= 0).sum())
    target = np.where(s > 0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    def nll(p):
        z = p[0] * f + p[1]
        # -[t log sigma(-z) + (1-t) log sigma(z)]
        return float(np.sum(target * np.logaddexp(0, z) + (1 - target) * np.logaddexp(0, -z)))

    b0 = np.log((n_neg + 1.0) / (n_pos + 1.0))
    res = minimize(nll, np.array([-1.0, b0]), method="BFGS")
    return float(res.x[0]), float(res.x[1])


def train_stage1(X, y, lam=1e-3, epochs=200, holdout=0.2, seed=42):
    """Max-margin event-type model with Platt-calibrated probabilities.

    The hinge model is trained on 80% of the rows; the sigmoid is fitted on
    the held-out rest.
    """
    X = np.asarray(X, dtype=float)
    if not np.isfinite(X).all():
        raise ValueError("non-finite feature value")
    classes = _classes(y, TYPES)
    if len(classes) != 2:
        raise ValueError(f"stage 1 needs exactly two classes, got {list(classes)}")
    s = np.where(np.asarray(y) == classes[1], 1.0, -1.0)
    rng = np.random.default_rng(seed)
    tr, ho = _split_holdout(s, holdout, rng)
    scaler = Standardizer.fit(X[tr])
    w = _pegasos(scaler.transform(X[tr]), s[tr], lam, epochs, rng)
    clf = LinearClassifier("hinge", classes, scaler, w[None, :-1], w[-1:], (1.0, 0.0), X.shape[1])
    cal_rows = ho if len(ho) else tr
    clf.calibration = platt_fit(clf.decision(X[cal_rows])[:, 0], s[cal_rows])
    return clf


def train_logistic(X, y, lam=1e-3, epochs=500, lr=0.5, classes=None):
    """Multinomial logistic regression by full-batch gradient descent.

    L2 penalty ``lam/2 ||W||^2`` on the weights only, so zero-information
    inputs converge to the class priors.
    """
    X = np.asarray(X, dtype=float)
    if not np.isfinite(X).all():
        raise ValueError("non-finite feature value")
    classes = tuple(classes) if classes else _classes(y, TIMES)
    present = set(y)
    missing = [c for c in classes if c not in present]
    if missing:
        raise ValueError(f"missing class(es) in training labels: {missing}")
    scaler = Standardizer.fit(X)
    Z = scaler.transform(X)
    n, d = Z.shape
    k = len(classes)
    Y = np.zeros((n, k))
    Y[np.arange(n), [classes.index(c) for c in y]] = 1.0
    W = np.zeros((k, d))
    b = np.log(Y.mean(axis=0))
    b -= b.mean()
    for _ in range(epochs):
        logits = Z @ W.T + b
        P = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        G = (P - Y) / n
        W -= lr * (G.T @ Z + lam * W)
        b -= lr * G.sum(axis=0)
    return LinearClassifier("softmax", classes, scaler, W, b, (1.0, 0.0), X.shape[1])


def stage2_features(X, stage1):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.hstack([X, stage1.predict_proba(X)])


def train_stage2(X, stage1, y, lam=1e-3, epochs=500):
    """Time-period model over the signal vector plus stage-1 type probabilities."""
    return train_logistic(stage2_features(X, stage1), y, lam=lam, epochs=epochs, classes=TIMES)


@dataclass
class CascadedClassifier:
    stage1: LinearClassifier
    stage2: LinearClassifier

    def predict(self, X):
        types = self.stage1.predict(X)
        times = self.stage2.predict(stage2_features(X, self.stage1))
        return list(zip(types, times))

    def to_json(self):
        return {"stage1": self.stage1.to_json(), "stage2": self.stage2.to_json()}

    @classmethod
    def from_json(cls, d):
        return cls(LinearClassifier.from_json(d["stage1"]), LinearClassifier.from_json(d["stage2"]))


# -- ranking-sensitive soft clustering --------------------------------------

@dataclass
class TimeTypeDistribution:
    """P(T_l, C_k | e, t) over the six CELLS."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (len(CELLS),):
            raise ValueError(f"distribution needs {len(CELLS)} cells, got shape {p.shape}")
        if (p < -1e-12).any() or (p > 1 + 1e-12).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("cell probabilities must lie in [0,1] and sum to 1")
        self.probs = p

    @classmethod
    def one_hot(cls, cell):
        p = np.zeros(len(CELLS))
        p[cell if isinstance(cell, int) else CELLS.index(tuple(cell))] = 1.0
        return cls(p)

    def as_dict(self):
        return {f"{c}/{t}": float(v) for (c, t), v in zip(CELLS, self.probs)}


def normalized_closeness(d2):
    """``1 - d2/max(d2)`` normalized to sum 1; uniform when every distance is equal."""
    d2 = np.asarray(d2, dtype=float)
    top = d2.max()
    if top <= 0:
        return np.full(len(d2), 1.0 / len(d2))
    raw = 1.0 - d2 / top
    total = raw.sum()
    if total <= 0:
        return np.full(len(d2), 1.0 / len(d2))
    return raw / total


@dataclass
class MixtureModel:
    mean: np.ndarray
    std: np.ndarray
    scale: np.ndarray  # importance weights
    centroids: np.ndarray  # (6, d) in scaled space, row i belongs to CELLS[i]
    variances: np.ndarray
    mixing: np.ndarray
    loglik: float = float("nan")
    n_iter: int = 0
    seed: int = 42

    def project(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (X - self.mean) / self.std * self.scale

    def to_json(self):
        return {
            "format": MODEL_FORMAT + ".mixture",
            "version": MODEL_VERSION,
            "standardization": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            "importance": self.scale.tolist(),
            "centroids": self.centroids.tolist(),
            "variances": self.variances.tolist(),
            "mixing": self.mixing.tolist(),
            "cells": [list(c) for c in CELLS],
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d):
        st = d["standardization"]
        return cls(np.array(st["mean"]), np.array(st["std"]), np.array(d["importance"]),
                   np.array(d["centroids"]), np.array(d["variances"]), np.array(d["mixing"]),
                   d["loglik"], d["n_iter"], d["seed"])


def _kmeans_pp(Z, k, rng):
    n = len(Z)
    centers = [Z[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((Z[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(Z[rng.integers(n)])
        else:
            centers.append(Z[rng.choice(n, p=d2 / total)])
    return np.array(centers)


def _spherical_em(Z, k, rng, max_iter, tol, ridge):
    n, d = Z.shape
    mu = _kmeans_pp(Z, k, rng)
    for _ in range(10):  # a few Lloyd steps settle the seeds
        lab = np.argmin(((Z[:, None, :] - mu[None]) ** 2).sum(-1), axis=1)
        mu = np.array([Z[lab == j].mean(axis=0) if (lab == j).any() else mu[j] for j in range(k)])
    var = np.full(k, max(Z.var() / k, ridge))
    pi = np.full(k, 1.0 / k)
    prev = -np.inf
    ll = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        d2 = ((Z[:, None, :] - mu[None]) ** 2).sum(-1)
        logp = np.log(pi)[None] - 0.5 * d * np.log(2 * np.pi * var)[None] - 0.5 * d2 / var[None]
        norm = logsumexp(logp, axis=1, keepdims=True)
        ll = float(norm.sum())
        resp = np.exp(logp - norm)
        nk = resp.sum(axis=0) + 1e-12
        pi = nk / n
        mu = (resp.T @ Z) / nk[:, None]
        d2 = ((Z[:, None, :] - mu[None]) ** 2).sum(-1)
        var = (resp * d2).sum(axis=0) / (nk * d) + ridge
        if abs(ll - prev) < tol:
            break
        prev = ll
    return mu, var, pi, resp, ll, it


def fit_mixture(X, cells, importance, seed=42, max_iter=100, tol=1e-6, ridge=1e-6, n_init=5):
    """Six-component spherical GMM over importance-scaled standardized vectors.

    ``cells`` gives each training row's CELLS index. Components are matched
    one-to-one to cells greedily by how many rows of that cell they hold,
    ties going to the more frequent cell. EM restarts ``n_init`` times from
    seeded k-means++ and keeps the best likelihood.
    """
    X = np.asarray(X, dtype=float)
    k = len(CELLS)
    if X.ndim != 2 or len(X) < k:
        raise ValueError(f"mixture needs at least {k} training vectors, got {len(X)}")
    scale = np.asarray(importance, dtype=float)
    if scale.shape != (X.shape[1],):
        raise ValueError("one importance weight per feature required")
    if not np.any(scale > 0) or (scale < 0).any():
        raise ValueError("degenerate scaling")
    cells = np.asarray(cells, dtype=int)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Z = (X - mean) / std * scale
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        run = _spherical_em(Z, k, rng, max_iter, tol, ridge)
        if best is None or run[4] > best[4] + 1e-9:
            best = run
    mu, var, pi, resp, ll, it = best

    hard = np.argmax(resp, axis=1)
    counts = np.zeros((k, k), dtype=int)
    np.add.at(counts, (hard, cells), 1)
    cell_freq = np.bincount(cells, minlength=k)
    order = sorted(((comp, cell) for comp in range(k) for cell in range(k)),
                   key=lambda p: (-counts[p], -cell_freq[p[1]], p[1], p[0]))
    comp_of = {}
    used = set()
    for comp, cell in order:
        if cell in comp_of or comp in used:
            continue
        comp_of[cell] = comp
        used.add(comp)
    perm = [comp_of[c] for c in range(k)]
    return MixtureModel(mean, std, scale, mu[perm], var[perm], pi[perm], ll, it, seed)


def soft_assign(model, x):
    """Ranking-sensitive distribution of one signal vector over the six cells."""
    z = model.project(x)[0]
    d2 = ((model.centroids - z) ** 2).sum(axis=1)
    return TimeTypeDistribution(normalized_closeness(d2))


def importance_from_interactions(coef, n_signal):
    """Per-signal-feature importance from a ranker trained on ``aspect x signal`` interactions.

    ``coef`` is laid out aspect-major, so column block ``j`` of the reshaped
    matrix holds every weight that touches signal feature ``j``. The block
    norms are rescaled to a maximum of 1.
    """
    coef = np.asarray(coef, dtype=float)
    if coef.size % n_signal:
        raise ValueError("coefficient length is not a multiple of the signal dimension")
    imp = np.linalg.norm(coef.reshape(-1, n_signal), axis=0)
    top = imp.max()
    if top <= 0:
        raise ValueError("degenerate scaling")
    return imp / top


def save_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
