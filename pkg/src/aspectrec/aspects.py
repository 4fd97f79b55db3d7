"""Aspect refinement: lexical + semantic similarity and affinity propagation."""

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .text import content_terms, levenshtein, strip_phrase, tokenize

logger = logging.getLogger(__name__)


class EmbeddingTable:
    """token -> dense vector, all of one dimension."""

    def __init__(self, vectors):
        if not vectors:
            raise ValueError("embedding table is empty")
        dims = {len(v) for v in vectors.values()}
        if len(dims) != 1:
            raise ValueError(f"embedding vectors have mixed dimensions {sorted(dims)}")
        self.dim = dims.pop()
        self.vectors = {t: np.asarray(v, dtype=float) for t, v in vectors.items()}

    @classmethod
    def load(cls, path):
        """Read the plain-text word-vector format, one ``token v1 ... vd`` per line."""
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh):
                parts = line.split()
                if not parts:
                    continue
                if n == 0 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    continue  # "count dim" header
                vectors[parts[0]] = [float(x) for x in parts[1:]]
        return cls(vectors)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in sorted(self.vectors):
                vals = " ".join(f"{x:.6f}" for x in self.vectors[tok])
                fh.write(f"{tok} {vals}\n")

    def mean_vector(self, text):
        vecs = [self.vectors[t] for t in tokenize(text) if t in self.vectors]
        if not vecs:
            return None
        return np.mean(vecs, axis=0)


def jaccard(a, b):
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@lru_cache(maxsize=262144)
def lexical_sim(a, b):
    """Mean of stemmed-term Jaccard and normalized edit similarity."""
    if a == b:
        return 1.0
    ta, tb = content_terms(a), content_terms(b)
    if not ta or not tb:
        ta, tb = tokenize(a), tokenize(b)
    longest = max(len(a), len(b))
    edit = 1.0 - levenshtein(a, b) / longest if longest else 1.0
    return 0.5 * jaccard(ta, tb) + 0.5 * edit


def semantic_sim(a, b, emb):
    """Cosine of mean token vectors mapped to [0, 1]; 0.5 when either side is all OOV."""
    va, vb = emb.mean_vector(a), emb.mean_vector(b)
    if va is None or vb is None:
        return 0.5
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.5
    cos = float(np.clip(va @ vb / (na * nb), -1.0, 1.0))
    return (cos + 1.0) / 2.0


@dataclass
class SimilarityMatrix:
    texts: list
    values: np.ndarray  # diagonal holds the preference
    lam_lex: float = 0.5
    lam_sem: float = 0.5
    oov_pairs: list = field(default_factory=list)

    @property
    def preference(self):
        return float(self.values[0, 0]) if len(self.texts) else float("nan")


def similarity_matrix(texts, emb, lam_lex=0.5, lam_sem=0.5, preference="median", strip=()):
    """Combined similarity over ``texts``.

    Phrases in ``strip`` (the entity aliases) are removed before comparing,
    so only the aspect part of each query is scored. The diagonal is set to
    ``preference``: a number, or "median" for the median off-diagonal value.
    """
    n = len(texts)
    keys = list(texts)
    for phrase in strip:
        keys = [strip_phrase(k, phrase) or k for k in keys]
    s = np.ones((n, n))
    oov = []
    for i in range(n):
        for j in range(i + 1, n):
            lex = lexical_sim(keys[i], keys[j])
            if emb is None:
                sem = 0.5
            else:
                sem = semantic_sim(keys[i], keys[j], emb)
                if emb.mean_vector(keys[i]) is None or emb.mean_vector(keys[j]) is None:
                    oov.append((i, j))
            s[i, j] = s[j, i] = lam_lex * lex + lam_sem * sem
    if n > 1:
        if preference == "median":
            pref = float(np.median(s[~np.eye(n, dtype=bool)]))
        else:
            pref = float(preference)
        np.fill_diagonal(s, pref)
    return SimilarityMatrix(list(texts), s, lam_lex, lam_sem, oov)


@dataclass
class APResult:
    labels: np.ndarray
    exemplars: np.ndarray
    n_iter: int
    converged: bool


def affinity_propagation(S, damping=0.7, max_iter=200, convergence_iter=15, seed=0):
    """Responsibility / availability message passing (Frey & Dueck).

    ``S`` is a similarity matrix (array or SimilarityMatrix) whose diagonal
    holds the preferences. A tiny seeded perturbation breaks exact ties.
    Every point is assigned to its most similar exemplar.
    """
    if not 0.5 <= damping < 1:
        raise ValueError("damping must lie in [0.5, 1)")
    S = np.array(S.values if isinstance(S, SimilarityMatrix) else S, dtype=float)
    n = S.shape[0]
    if n == 0:
        return APResult(np.zeros(0, dtype=int), np.zeros(0, dtype=int), 0, True)
    if n == 1:
        return APResult(np.zeros(1, dtype=int), np.zeros(1, dtype=int), 0, True)

    off = S[~np.eye(n, dtype=bool)]
    pref = np.diag(S)
    if np.all(off == off[0]) and np.all(pref == pref[0]):
        # Fully symmetric input: one cluster unless self-preference wins.
        if pref[0] > off[0]:
            return APResult(np.arange(n), np.arange(n), 0, True)
        return APResult(np.zeros(n, dtype=int), np.zeros(1, dtype=int), 0, True)

    rng = np.random.default_rng(seed)
    tiny = np.finfo(float).tiny
    S = S + (np.finfo(float).eps * S + tiny * 100) * rng.standard_normal((n, n))

    A = np.zeros((n, n))
    R = np.zeros((n, n))
    rows = np.arange(n)
    history = np.zeros((n, convergence_iter), dtype=bool)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        AS = A + S
        first = np.argmax(AS, axis=1)
        best = AS[rows, first]
        AS[rows, first] = -np.inf
        second = AS.max(axis=1)
        Rn = S - best[:, None]
        Rn[rows, first] = S[rows, first] - second
        R = damping * R + (1 - damping) * Rn

        Rp = np.maximum(R, 0)
        np.fill_diagonal(Rp, R.diagonal())
        col = Rp.sum(axis=0)
        An = col[None, :] - Rp
        dA = An.diagonal().copy()
        An = np.minimum(An, 0)
        np.fill_diagonal(An, dA)
        A = damping * A + (1 - damping) * An

        is_ex = (A.diagonal() + R.diagonal()) > 0
        history[:, (it - 1) % convergence_iter] = is_ex
        if it >= convergence_iter:
            stable = np.all(history == history[:, :1], axis=1).all()
            if stable and is_ex.any():
                converged = True
                break

    exemplars = np.flatnonzero((A.diagonal() + R.diagonal()) > 0)
    if len(exemplars) == 0:
        logger.warning("affinity propagation found no exemplar; every point is its own cluster")
        return APResult(np.arange(n), np.arange(n), it, False)
    assign = np.argmax(S[:, exemplars], axis=1)
    assign[exemplars] = np.arange(len(exemplars))
    return APResult(assign, exemplars, it, converged)


@dataclass
class AspectCandidate:
    text: str
    rwr_score: float
    cluster_id: int
    is_representative: bool
    frequency: int


def cluster_candidates(cands, emb, frequency, strip=(), lam_lex=0.5, lam_sem=0.5,
                       preference="median", damping=0.7, max_iter=200):
    """Cluster ranked (query, rwr_score) pairs; one representative per cluster.

    The representative is the most frequent query, then the higher RWR
    score, then the lexicographically smaller text.
    """
    if not cands:
        return []
    texts = [q for q, _ in cands]
    sm = similarity_matrix(texts, emb, lam_lex, lam_sem, preference, strip)
    ap = affinity_propagation(sm, damping=damping, max_iter=max_iter)
    out = []
    for cid in range(int(ap.labels.max()) + 1):
        members = [i for i in range(len(texts)) if ap.labels[i] == cid]
        if not members:
            continue
        rep = min(members, key=lambda i: (-frequency.get(texts[i], 0), -cands[i][1], texts[i]))
        for i in members:
            out.append(AspectCandidate(texts[i], float(cands[i][1]), cid, i == rep,
                                       int(frequency.get(texts[i], 0))))
    return out


def extract_aspects(cands, emb, k, frequency, **kwargs):
    """Top-k cluster representatives ordered by RWR score."""
    if k <= 0:
        raise ValueError("k must be positive")
    members = cluster_candidates(cands, emb, frequency, **kwargs)
    reps = [a for a in members if a.is_representative]
    reps.sort(key=lambda a: (-a.rwr_score, a.text))
    return reps[:k]
