"""Long-term salience and short-term interest features for (entity, aspect, day)."""

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .text import content_terms

logger = logging.getLogger(__name__)

LM_FLOOR = -1e9
FEATURE_NAMES = ("tfidf", "mle", "entropy", "lm", "click_entropy", "momentum", "cross_corr",
                 "temporal_lm", "rwr_score")
PRESENCE_NAMES = ("has_cross_corr", "has_temporal_lm")
SALIENCE = ("tfidf", "mle", "entropy", "lm")
TIMELINESS = ("click_entropy", "momentum", "cross_corr", "temporal_lm")


@dataclass
class Article:
    id: str
    title: str
    sections: list  # [(title, text)]
    inlinks: list

    def __post_init__(self):
        if not self.sections:
            raise ValueError(f"article {self.id!r} has no sections")
        for title, text in self.sections:
            if not text.strip():
                raise ValueError(f"article {self.id!r} has an empty section {title!r}")

    @property
    def text(self):
        return " ".join(t for _, t in self.sections)


class CorpusStore:
    """Articles by id plus free text per URL.

    ``inlinks`` on an article lists the ids of articles that link to it.
    """

    def __init__(self, articles, url_texts):
        self.articles = {a.id: a for a in articles}
        self.url_texts = dict(url_texts)
        self._sections = {}
        self._doc = {}

    @classmethod
    def load(cls, path):
        articles, urls = [], {}
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "url" in rec:
                    urls[rec["url"]] = rec["text"]
                elif "entity_id" in rec:
                    secs = [(s.get("title", ""), s["text"]) for s in rec.get("sections", [])]
                    articles.append(Article(rec["entity_id"], rec.get("title", ""), secs,
                                            list(rec.get("inlinks", []))))
                else:
                    raise ValueError(f"corpus line {n}: neither an article nor a url record")
        return cls(articles, urls)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for aid in sorted(self.articles):
                a = self.articles[aid]
                rec = {"entity_id": a.id, "title": a.title,
                       "sections": [{"title": t, "text": x} for t, x in a.sections],
                       "inlinks": a.inlinks}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            for url in sorted(self.url_texts):
                fh.write(json.dumps({"url": url, "text": self.url_texts[url]}, sort_keys=True) + "\n")

    def __contains__(self, entity):
        return entity in self.articles

    def sections_for(self, entity):
        """Term counts of every section of the entity's article and its in-link articles."""
        if entity not in self.articles:
            raise KeyError(f"entity {entity!r} not in corpus")
        if entity not in self._sections:
            docs = [self.articles[entity]]
            docs += [self.articles[i] for i in self.articles[entity].inlinks if i in self.articles]
            self._sections[entity] = [Counter(content_terms(t)) for d in docs for _, t in d.sections]
        return self._sections[entity]

    def entity_doc(self, entity):
        if entity not in self.articles:
            raise KeyError(f"entity {entity!r} not in corpus")
        if entity not in self._doc:
            self._doc[entity] = Counter(content_terms(self.articles[entity].text))
        return self._doc[entity]

    @cached_property
    def background(self):
        bg = Counter()
        for a in self.articles.values():
            bg.update(content_terms(a.text))
        for text in self.url_texts.values():
            bg.update(content_terms(text))
        return bg

    @cached_property
    def background_total(self):
        return sum(self.background.values())

    def p_background(self, w):
        """Add-one smoothed unigram probability over the whole corpus."""
        if not self.background_total:
            raise ValueError("empty corpus")
        return (self.background[w] + 1.0) / (self.background_total + len(self.background) + 1.0)


def aspect_terms(query, aliases):
    """Stemmed content terms of ``query`` not belonging to any alias.

    Falls back to every content term when the query is only the entity name.
    """
    alias_terms = {t for a in aliases for t in content_terms(a)}
    terms = content_terms(query)
    rest = [t for t in terms if t not in alias_terms]
    return rest or terms


def _terms(aspect):
    terms = content_terms(aspect) if isinstance(aspect, str) else list(aspect)
    if not terms:
        raise ValueError("aspect is empty after normalization")
    return terms


# -- salience ---------------------------------------------------------------

def tfidf_salience(aspect, entity, corpus):
    """Mean over aspect terms of max-over-sections tf * ln(N_sec / df)."""
    terms = _terms(aspect)
    secs = corpus.sections_for(entity)
    n_sec = len(secs)
    total = 0.0
    for w in terms:
        df = sum(1 for s in secs if w in s)
        if df:
            total += max(s[w] for s in secs) * math.log(n_sec / df)
    return total / len(terms)


class CooccurrenceStats:
    """Daily counts of queries that contain an alias of the entity and a given term."""

    def __init__(self, index, aliases):
        self.index = index
        qids = index.matching_queries(tuple(aliases))
        self.term_rows = {}
        for qid in qids:
            for w in set(content_terms(index.queries[qid])):
                self.term_rows.setdefault(w, []).append(qid)
        self._daily = {}
        self._fm = index.freq_matrix
        self.query_ids = qids

    def daily(self, w):
        if w not in self._daily:
            ids = self.term_rows.get(w)
            if not ids:
                self._daily[w] = np.zeros(self.index.n_days)
            else:
                self._daily[w] = np.asarray(self._fm[ids].sum(axis=0)).ravel()
        return self._daily[w]

    def aspect_daily(self, terms):
        out = np.zeros(self.index.n_days)
        for w in terms:
            out = out + self.daily(w)
        return out


def mle_salience(aspect, candidates, stats, until):
    """Share of the entity co-occurrence mass (log start .. ``until``) held by ``aspect``.

    ``candidates`` are the term lists of the entity's whole candidate set
    and ``until`` is a day offset into the log.
    """
    def mass(terms):
        return float(sum(stats.daily(w)[: until + 1].sum() for w in terms))

    den = sum(mass(_terms(a)) for a in candidates)
    if den <= 0:
        logger.warning("mle salience: zero co-occurrence mass, returning 0")
        return 0.0
    return mass(_terms(aspect)) / den


def entropy(p):
    p = np.asarray(p, dtype=float)
    total = p.sum()
    if total <= 0:
        return 0.0
    p = p / total
    p = p[p > 0]  # after normalizing, so underflowed shares count as zero
    return float(max(-(p * np.log(p)).sum(), 0.0))


def entropy_salience(aspect, stats, start, until):
    """Entropy of the aspect's daily co-occurrence distribution over [start, until]."""
    return entropy(stats.aspect_daily(_terms(aspect))[start: until + 1])


def dirichlet_lm(terms, doc, doc_len, corpus, mu):
    total = 0.0
    for w in terms:
        num = doc.get(w, 0) + mu * corpus.p_background(w)
        if num <= 0 or doc_len + mu <= 0:
            return LM_FLOOR
        total += math.log(num / (doc_len + mu))
    return max(total, LM_FLOOR)


def lm_salience(aspect, entity, corpus, mu=2000.0):
    """Dirichlet-smoothed log-likelihood of the aspect under the entity's article."""
    doc = corpus.entity_doc(entity)
    return dirichlet_lm(_terms(aspect), doc, sum(doc.values()), corpus, mu)


# -- short-term interest ----------------------------------------------------

def temporal_click_entropy(query, index, day):
    """Entropy of the URL click distribution of ``query`` on ``day`` alone."""
    clicks = index.clicks_on(query, day)
    return entropy(list(clicks.values()))


def trending_momentum(ts, t, i_s=1, i_l=5):
    """Ma(t, i_s) - Ma(t, i_l) with Ma the trailing mean ending at index t."""
    y = np.asarray(ts, dtype=float)
    if not 1 <= i_s <= i_l:
        raise ValueError("need 1 <= i_s <= i_l")
    if t < i_l - 1 or t >= len(y):
        raise ValueError(f"insufficient history for momentum at t={t} with i_l={i_l}")
    y = y - y[t]  # centring on the current value keeps constant series at exactly 0
    return float(y[t - i_s + 1: t + 1].mean() - y[t - i_l + 1: t + 1].mean())


def cross_correlation_flagged(ts_e, ts_a, t, max_lag=1, window=14):
    """Max Pearson correlation over lags in [-max_lag, max_lag], with a validity flag.

    Both series are cut to the trailing ``window`` days ending at index t;
    lag k pairs ``e[i]`` with ``a[i + k]`` over the overlapping days.
    """
    e = np.asarray(ts_e, dtype=float)[max(0, t - window + 1): t + 1]
    a = np.asarray(ts_a, dtype=float)[max(0, t - window + 1): t + 1]
    n = len(e)
    if n < 3 or len(a) != n:
        raise ValueError("cross correlation needs at least 3 aligned points")
    best = None
    for k in range(-max_lag, max_lag + 1):
        x = e[max(0, -k): n - max(0, k)]
        y = a[max(0, k): n - max(0, -k)]
        if len(x) < 2 or x.std() == 0 or y.std() == 0:
            continue
        r = float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))
        best = r if best is None else max(best, r)
    if best is None:
        return 0.0, False
    return best, True


def cross_correlation(ts_e, ts_a, t, max_lag=1, window=14):
    return cross_correlation_flagged(ts_e, ts_a, t, max_lag, window)[0]


def top_clicked_urls(index, query_ids, day, k=3):
    clicks = index.url_clicks_on(query_ids, day)
    ranked = sorted(clicks.items(), key=lambda kv: (-kv[1], kv[0]))
    return [u for u, _ in ranked[:k]]


def temporal_lm_flagged(aspect, urls, corpus, mu=2000.0):
    """LM score of the aspect under the concatenated texts of ``urls``."""
    texts = [corpus.url_texts[u] for u in urls if u in corpus.url_texts]
    if not texts:
        return 0.0, False
    doc = Counter(content_terms(" ".join(texts)))
    return dirichlet_lm(_terms(aspect), doc, sum(doc.values()), corpus, mu), True


def temporal_lm(aspect, entity_query_ids, corpus, index, day, k=3, mu=2000.0):
    urls = top_clicked_urls(index, entity_query_ids, day, k)
    return temporal_lm_flagged(aspect, urls, corpus, mu)[0]


# -- assembled vectors ------------------------------------------------------

@dataclass
class AspectFeatureVector:
    tfidf: float
    mle: float
    entropy: float
    lm: float
    click_entropy: float
    momentum: float
    cross_corr: float
    temporal_lm: float
    rwr_score: float
    has_cross_corr: bool = True
    has_temporal_lm: bool = True

    def __post_init__(self):
        for f in FEATURE_NAMES:
            if not math.isfinite(getattr(self, f)):
                raise ValueError(f"feature {f} is not finite")

    def as_array(self):
        vals = [getattr(self, f) for f in FEATURE_NAMES]
        vals += [float(getattr(self, f)) for f in PRESENCE_NAMES]
        return np.array(vals, dtype=float)


ALL_COLUMNS = FEATURE_NAMES + PRESENCE_NAMES


@dataclass
class FeatureParams:
    mu: float = 2000.0
    i_s: int = 1
    i_l: int = 5
    ccf_window: int = 14
    max_lag: int = 1
    top_k_lm: int = 3


class EntityFeatures:
    """Feature computation for one entity's candidate aspects."""

    def __init__(self, entity, aliases, index, corpus, params=None):
        self.entity = entity
        self.aliases = list(aliases)
        self.index = index
        self.corpus = corpus
        self.params = params or FeatureParams()
        self.stats = CooccurrenceStats(index, self.aliases)
        self.entity_series = index.daily_sum(self.stats.query_ids)

    def vector(self, aspect_query, candidate_queries, day_offset, rwr_score):
        p = self.params
        t = day_offset
        terms = aspect_terms(aspect_query, self.aliases)
        cand_terms = [aspect_terms(q, self.aliases) for q in candidate_queries]
        in_corpus = self.entity in self.corpus
        tfidf = tfidf_salience(terms, self.entity, self.corpus) if in_corpus else 0.0
        lm = lm_salience(terms, self.entity, self.corpus, p.mu) if in_corpus else 0.0
        mle = mle_salience(terms, cand_terms, self.stats, t)
        ent = entropy_salience(terms, self.stats, 0, t)
        day = self.index.day(t)
        click_ent = temporal_click_entropy(aspect_query, self.index, day)
        series = self.index.daily(aspect_query) if aspect_query in self.index.query_id else np.zeros(self.index.n_days)
        mom = trending_momentum(series, t, p.i_s, p.i_l) if t >= p.i_l - 1 else 0.0
        if t >= 2:
            ccf, has_ccf = cross_correlation_flagged(self.entity_series, series, t, p.max_lag, p.ccf_window)
        else:
            ccf, has_ccf = 0.0, False
        urls = top_clicked_urls(self.index, self.stats.query_ids, day, p.top_k_lm)
        tlm, has_tlm = temporal_lm_flagged(terms, urls, self.corpus, p.mu)
        return AspectFeatureVector(tfidf, mle, ent, lm, click_ent, mom, ccf, tlm, float(rwr_score),
                                   has_ccf, has_tlm)


def write_feature_csv(path, rows):
    """rows: (entity, aspect, day_iso, AspectFeatureVector, grade or None)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "aspect", "day"] + list(ALL_COLUMNS) + ["grade"])
        for entity, aspect, day, vec, grade in rows:
            vals = [f"{v:.10g}" for v in vec.as_array()]
            w.writerow([entity, aspect, day] + vals + ["" if grade is None else grade])


def read_feature_csv(path):
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            kw = {f: float(rec[f]) for f in FEATURE_NAMES}
            kw.update({f: rec[f] in ("1", "1.0", "True") for f in PRESENCE_NAMES})
            grade = int(rec["grade"]) if rec["grade"] != "" else None
            out.append((rec["entity"], rec["aspect"], rec["day"], AspectFeatureVector(**kw), grade))
    return out

