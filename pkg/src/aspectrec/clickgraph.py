"""Co-clicked query-URL bipartite graph and random walk with restart."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

EPS_WEIGHT = 1e-9


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def cf_iqf(cf, qf, n_queries):
    """Click frequency times inverse query frequency, ``cf * ln(N / (qf + 1))``.

    Non-positive weights (``N <= qf + 1``) are clamped to ``EPS_WEIGHT``.
    """
    if cf < 1:
        raise ValueError(f"click frequency must be >= 1, got {cf}")
    if qf < 1:
        raise ValueError(f"query frequency must be >= 1, got {qf}")
    w = cf * math.log(n_queries / (qf + 1))
    if w <= 0:
        logger.warning("cf-iqf weight %.3g for cf=%s qf=%s N=%s clamped", w, cf, qf, n_queries)
        return EPS_WEIGHT
    return w


@dataclass
class ClickGraph:
    """Weighted bipartite graph; node ids are queries first, then urls."""

    queries: list
    urls: list
    edge_q: np.ndarray
    edge_u: np.ndarray
    cf: np.ndarray
    qf: np.ndarray
    weight: np.ndarray
    n_queries_total: int

    def __post_init__(self):
        self.query_id = {q: i for i, q in enumerate(self.queries)}
        nq, nu = len(self.queries), len(self.urls)
        n = nq + nu
        rows = np.concatenate([self.edge_q, nq + self.edge_u])
        cols = np.concatenate([nq + self.edge_u, self.edge_q])
        w = np.concatenate([self.weight, self.weight])
        adj = sparse.csr_matrix((w, (rows, cols)), shape=(n, n))
        out = np.asarray(adj.sum(axis=1)).ravel()
        inv = np.divide(1.0, out, out=np.zeros_like(out), where=out > 0)
        self.transition = sparse.csr_matrix(sparse.diags(inv) @ adj)
        self.dangling = out == 0

    @property
    def n_nodes(self):
        return len(self.queries) + len(self.urls)

    def write_edges(self, path):
        """Edge list TSV (query, url, cf, qf, weight) in (query, url) order."""
        order = sorted(range(len(self.edge_q)), key=lambda k: (self.queries[self.edge_q[k]], self.urls[self.edge_u[k]]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("query\turl\tcf\tqf\tweight\n")
            for k in order:
                fh.write(
                    f"{self.queries[self.edge_q[k]]}\t{self.urls[self.edge_u[k]]}\t"
                    f"{int(self.cf[k])}\t{int(self.qf[k])}\t{self.weight[k]:.10g}\n"
                )


def graph_from_counts(pairs, n_queries_total=None, queries=()):
    """Build a graph from {(query, url): click count}.

    ``n_queries_total`` is N in the IQF term and defaults to the number of
    distinct queries in the graph. Extra ``queries`` become isolated nodes.
    """
    pairs = {k: v for k, v in pairs.items() if v > 0}
    qs = sorted({q for q, _ in pairs} | set(queries))
    us = sorted({u for _, u in pairs})
    qid = {q: i for i, q in enumerate(qs)}
    uid = {u: i for i, u in enumerate(us)}
    keys = sorted(pairs)
    eq = np.array([qid[q] for q, _ in keys], dtype=np.int64)
    eu = np.array([uid[u] for _, u in keys], dtype=np.int64)
    cf = np.array([pairs[k] for k in keys], dtype=float)
    qf = np.bincount(eu, minlength=len(us))[eu] if len(keys) else np.zeros(0)
    n_total = n_queries_total if n_queries_total is not None else len(qs)
    w = np.array([cf_iqf(c, f, n_total) for c, f in zip(cf, qf)], dtype=float)
    return ClickGraph(qs, us, eq, eu, cf, qf.astype(float), w, n_total)


def build_graph(index, until_day=None):
    """Graph of all (query, url) clicks in ``index`` up to ``until_day`` inclusive.

    N counts the distinct queries issued up to ``until_day``.
    """
    if len(index) == 0:
        raise ValueError("log index is empty")
    mask = np.ones(len(index.click_q), dtype=bool)
    if until_day is not None:
        mask = index.click_day <= index.offset(until_day)
    if not mask.any():
        raise ValueError("empty click graph")
    q, u, c = index.click_q[mask], index.click_u[mask], index.click_count[mask]
    key = q * len(index.urls) + u
    uniq, inv = np.unique(key, return_inverse=True)
    totals = np.bincount(inv, weights=c)
    pairs = {
        (index.queries[int(k // len(index.urls))], index.urls[int(k % len(index.urls))]): int(t)
        for k, t in zip(uniq, totals)
    }
    if until_day is None:
        n_total = len(index)
    else:
        fm = index.freq_matrix[:, : index.offset(until_day) + 1]
        n_total = int((np.asarray(fm.sum(axis=1)).ravel() > 0).sum())
    return graph_from_counts(pairs, n_total)


@dataclass
class RwrResult:
    source: str
    scores: list  # [(query, score)], descending, source excluded
    full: np.ndarray  # stationary vector over all nodes
    iterations: int


def rwr(graph, source, restart=0.15, tol=1e-10, max_iter=10_000):
    """Personalized random walk with restart from one query node.

    Iterates ``pi = (1 - restart) P^T pi + restart e_source`` until the L1
    change drops below ``tol``. Mass reaching a dangling node returns to the
    source, so ``pi`` stays a distribution.
    """
    if not 0 < restart < 1:
        raise ValueError("restart probability must lie in (0, 1)")
    if source not in graph.query_id:
        raise KeyError(f"source query {source!r} not in graph")
    s = graph.query_id[source]
    n = graph.n_nodes
    pt = graph.transition.T.tocsr()
    e = np.zeros(n)
    e[s] = 1.0
    pi = e.copy()
    resid = np.inf
    for it in range(1, max_iter + 1):
        lost = pi[graph.dangling].sum()
        nxt = (1 - restart) * (pt @ pi) + (restart + (1 - restart) * lost) * e
        resid = np.abs(nxt - pi).sum()
        pi = nxt
        if resid < tol:
            break
    else:
        raise ConvergenceError(f"rwr did not converge in {max_iter} iterations", resid)
    scores = [
        (q, float(pi[i])) for i, q in enumerate(graph.queries) if i != s
    ]
    scores.sort(key=lambda t: (-t[1], t[0]))
    return RwrResult(source, scores, pi, it)


def candidates(graph, source, k, restart=0.15, tol=1e-10, accept=None):
    """Top-k reachable queries by RWR score, ties broken lexicographically.

    ``accept`` optionally filters query strings before the cut.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    res = rwr(graph, source, restart=restart, tol=tol)
    out = [(q, sc) for q, sc in res.scores if sc > 0 and (accept is None or accept(q))]
    return out[:k]
