import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aspectrec.features import (LM_FLOOR, Article, AspectFeatureVector, CooccurrenceStats,
                                CorpusStore, EntityFeatures, aspect_terms, cross_correlation,
                                cross_correlation_flagged, entropy, entropy_salience, lm_salience,
                                mle_salience, read_feature_csv, temporal_click_entropy,
                                temporal_lm, temporal_lm_flagged, tfidf_salience,
                                trending_momentum, write_feature_csv)
from aspectrec.logstore import EntityAliasTable, ingest
from aspectrec.synth import SynthSpec, generate


def _corpus():
    arts = [
        Article("e", "E", [("one", "ticket ticket ticket match"), ("two", "match arena")], []),
        Article("f", "F", [("main", "apple banana apple banana apple")], []),
    ]
    return CorpusStore(arts, {"http://f": "apple banana apple banana apple"})


def test_tfidf_hand_values():
    c = _corpus()
    assert tfidf_salience(["ticket"], "e", c) == pytest.approx(3 * math.log(2))
    assert tfidf_salience(["match"], "e", c) == 0.0  # in every section
    assert tfidf_salience(["zebra"], "e", c) == 0.0
    assert tfidf_salience(["ticket", "zebra"], "e", c) == pytest.approx(1.5 * math.log(2))
    with pytest.raises(ValueError):
        tfidf_salience("the of", "e", c)


def test_corpus_round_trip(tmp_path):
    c = _corpus()
    c.save(tmp_path / "c.jsonl")
    back = CorpusStore.load(tmp_path / "c.jsonl")
    assert set(back.articles) == {"e", "f"} and back.url_texts == c.url_texts
    with pytest.raises(ValueError):
        Article("x", "X", [], [])
    with pytest.raises(ValueError):
        Article("x", "X", [("a", "  ")], [])


def test_lm_hand_values():
    c = _corpus()
    # "apple" has tf 3 in a 5-term document
    assert lm_salience(["appl"], "f", c, mu=0) == pytest.approx(math.log(0.6))
    assert lm_salience(["zebra"], "f", c, mu=0) == LM_FLOOR
    doc = Article("g", "G", [("s", "alpha alpha beta gamma delta epsilon zeta eta theta iota")], [])
    c2 = CorpusStore([doc], {})
    assert lm_salience(["alpha"], "g", c2, mu=0) == pytest.approx(math.log(0.2))
    big = lm_salience(["alpha"], "g", c2, mu=1e9)
    assert big == pytest.approx(math.log(c2.p_background("alpha")), rel=0.01)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 20), st.floats(0, 5000))
def test_lm_monotone_in_tf(tf, mu):
    text = " ".join(["alpha"] * tf + ["beta"] * 5)
    more = " ".join(["alpha"] * (tf + 1) + ["beta"] * 5)
    bg = Article("bg", "B", [("s", "alpha beta gamma")], [])
    lo = lm_salience(["alpha"], "g", CorpusStore([Article("g", "G", [("s", text)], []), bg], {}), mu)
    # same background counts: swap a background token for the extra occurrence
    bg2 = Article("bg", "B", [("s", "beta gamma")], [])
    hi = lm_salience(["alpha"], "g", CorpusStore([Article("g", "G", [("s", more)], []), bg2], {}), mu)
    assert hi >= lo - 1e-12


@pytest.fixture
def cooc_index(log_writer):
    rows = []
    for i in range(30):
        rows.append(("u", "ncaa tickets", f"2006-03-0{1 + i % 3} 10:00:00", "", ""))
    for i in range(10):
        rows.append(("u", "ncaa scores", f"2006-03-0{1 + i % 2} 11:00:00", "", ""))
    rows += [("u", "weather news", "2006-03-01 09:00:00", "", "")] * 6
    clicks = [("http://a", 3), ("http://b", 1)]
    for url, n in clicks:
        rows += [("u", "ncaa tickets", "2006-03-02 12:00:00", "1", url)] * n
    return ingest(log_writer(rows), min_qf=1, min_click=1)


def test_mle_hand_values(cooc_index):
    stats = CooccurrenceStats(cooc_index, ["ncaa"])
    cands = [["ticket"], ["score"]]
    end = cooc_index.n_days - 1
    assert mle_salience(["ticket"], cands, stats, end) == pytest.approx(34 / 44)
    assert mle_salience(["score"], cands, stats, end) == pytest.approx(10 / 44)
    assert mle_salience(["score"], [["score"]], stats, end) == 1.0
    assert mle_salience(["weather"], cands, stats, end) == 0.0
    assert mle_salience(["weather"], [["weather"]], stats, end) == 0.0


def test_mle_thirty_and_ten(log_writer):
    rows = [("u", "e alpha", "2006-03-01 10:00:00", "", "")] * 30
    rows += [("u", "e beta", "2006-03-02 10:00:00", "", "")] * 10
    stats = CooccurrenceStats(ingest(log_writer(rows), min_qf=1), ["e"])
    assert mle_salience(["alpha"], [["alpha"], ["beta"]], stats, 1) == pytest.approx(0.75)
    assert mle_salience(["beta"], [["alpha"], ["beta"]], stats, 1) == pytest.approx(0.25)


def test_entropy_values(cooc_index):
    assert entropy([0, 5, 0]) == 0.0
    assert entropy([2, 2, 2, 2]) == pytest.approx(math.log(4))
    assert entropy([0, 0]) == 0.0
    stats = CooccurrenceStats(cooc_index, ["ncaa"])
    assert entropy_salience(["score"], stats, 0, 1) == pytest.approx(math.log(2))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=10))
def test_entropy_bounds_and_point_mass(p):
    h = entropy(p)
    assert 0 <= h <= math.log(len(p)) + 1e-9
    total = sum(p)
    positive = sum(1 for v in p if total > 0 and v / total > 0)
    if total > 0:
        assert (h == 0) == (positive == 1)


def test_click_entropy(cooc_index):
    assert temporal_click_entropy("ncaa tickets", cooc_index, 1) == pytest.approx(
        -(0.75 * math.log(0.75) + 0.25 * math.log(0.25)))
    assert temporal_click_entropy("ncaa tickets", cooc_index, 1) == pytest.approx(0.5623, abs=1e-4)
    assert temporal_click_entropy("ncaa tickets", cooc_index, 0) == 0.0
    assert entropy([4, 4]) == pytest.approx(math.log(2))


def test_momentum():
    assert trending_momentum([1, 2, 3, 4, 5], 4, 1, 5) == 2.0
    assert trending_momentum([5, 4, 3, 2, 1], 4, 1, 5) == -2.0
    assert trending_momentum([7] * 9, 8, 1, 5) == 0.0
    with pytest.raises(ValueError):
        trending_momentum([1, 2, 3], 2, 1, 5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1e6), st.integers(5, 30), st.integers(1, 5))
def test_momentum_constant_is_zero(c, n, i_s):
    assert trending_momentum([c] * n, n - 1, i_s, 5) == 0.0


def _brute_ccf(e, a):
    out = []
    n = len(e)
    for k in (-1, 0, 1):
        x = e[max(0, -k): n - max(0, k)]
        y = a[max(0, k): n - max(0, -k)]
        out.append(np.corrcoef(x, y)[0, 1])
    return max(out)


def test_cross_correlation_cases():
    rng = np.random.default_rng(0)
    e = rng.random(14)
    assert cross_correlation(e, e, 13) == pytest.approx(1.0)
    shifted = np.r_[0.3, e[:-1]]
    assert cross_correlation(e, shifted, 13) == pytest.approx(1.0)
    anti = -e + 5
    v = cross_correlation(e, anti, 13)
    assert v < 0 and v == pytest.approx(_brute_ccf(e, anti))
    assert cross_correlation_flagged(e, np.ones(14), 13) == (0.0, False)


def test_temporal_lm_cases():
    c = _corpus()
    lm = lm_salience(["appl"], "f", c, mu=10)
    assert temporal_lm_flagged(["appl"], ["http://f"], c, mu=10) == (pytest.approx(lm), True)
    assert temporal_lm_flagged(["appl"], ["http://missing"], c) == (0.0, False)
    assert temporal_lm_flagged(["appl"], [], c) == (0.0, False)


def test_temporal_lm_uses_top_urls(cooc_index):
    c = CorpusStore([Article("x", "X", [("s", "filler")], [])],
                    {"http://a": "ticket ticket office", "http://b": "score"})
    ids = cooc_index.matching_queries(("ncaa",))
    v = temporal_lm(["ticket"], ids, c, cooc_index, 1, k=1, mu=0)
    assert v == pytest.approx(math.log(2 / 3))
    assert temporal_lm(["ticket"], ids, c, cooc_index, 0, k=1) == 0.0


def test_aspect_terms():
    assert aspect_terms("ncaa tickets", ["ncaa"]) == ["ticket"]
    assert aspect_terms("ncaa", ["ncaa"]) == ["ncaa"]


def test_feature_vector_validation_and_csv(tmp_path):
    v = AspectFeatureVector(1, 0.5, 0.2, -3, 0.1, 2, 0.3, -4, 0.01, True, False)
    assert v.as_array().shape == (11,)
    write_feature_csv(tmp_path / "f.csv", [("e", "e a", "2006-03-01", v, 3), ("e", "e b", "2006-03-01", v, None)])
    back = read_feature_csv(tmp_path / "f.csv")
    assert back[0][3] == v and back[0][4] == 3 and back[1][4] is None
    with pytest.raises(ValueError):
        AspectFeatureVector(float("nan"), 0, 0, 0, 0, 0, 0, 0, 0)


@pytest.fixture(scope="module")
def small_world(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(n_breaking=3, n_anticipated=3, n_generic_articles=20, seed=5)
    res = generate(spec, out)
    index = ingest(res.paths["log"])
    return res, index, EntityAliasTable.load(res.paths["aliases"]), CorpusStore.load(res.paths["corpus"])


def test_features_finite_on_synthetic_corpus(small_world):
    res, index, aliases, corpus = small_world
    rng = np.random.default_rng(0)
    for ent in res.entities:
        ef = EntityFeatures(ent.id, aliases.aliases(ent.id), index, corpus)
        queries = [f"{ent.name} {w}" for _, w in ent.aspects]
        for _ in range(6):
            q = queries[rng.integers(len(queries))]
            t = int(rng.integers(0, index.n_days))
            v = ef.vector(q, queries, t, float(rng.random()))
            x = v.as_array()
            assert np.isfinite(x).all()
            assert v.entropy >= 0 and v.click_entropy >= 0 and -1 <= v.cross_corr <= 1
