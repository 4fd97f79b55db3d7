import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aspectrec.aspects import (EmbeddingTable, affinity_propagation, extract_aspects,
                               lexical_sim, semantic_sim, similarity_matrix)
from aspectrec.text import levenshtein


@pytest.fixture
def emb():
    return EmbeddingTable({
        "world": [1.0, 0.0, 0.0], "cup": [0.0, 1.0, 0.0], "tickets": [0.0, 0.0, 1.0],
        "ticket": [0.0, 0.2, 1.0], "x": [1.0, 0.0, 0.0], "y": [0.0, 1.0, 0.0],
        "neg": [-1.0, 0.0, 0.0],
    })


def test_lexical_identity_and_disjoint():
    assert lexical_sim("world cup", "world cup") == 1.0
    assert lexical_sim("aaaa", "bbbb") == 0.0


def test_lexical_stemmed_near_duplicate():
    a, b = "world cup tickets", "world cup ticket"
    edit = 1 - levenshtein(a, b) / len(a)
    assert lexical_sim(a, b) == pytest.approx(0.5 * 1.0 + 0.5 * edit)
    assert lexical_sim(a, b) > 0.9


def test_lexical_stopword_only_falls_back_to_raw_tokens():
    # both sides are stop words only, so raw-token Jaccard is used: {the} vs {the, of} = 1/2
    edit = 1 - levenshtein("the", "the of") / 6
    assert lexical_sim("the", "the of") == pytest.approx(0.25 + 0.5 * edit)


def test_semantic_cases(emb):
    assert semantic_sim("world cup", "world cup", emb) == pytest.approx(1.0)
    assert semantic_sim("x", "y", emb) == pytest.approx(0.5)
    assert semantic_sim("x", "neg", emb) == pytest.approx(0.0)
    assert semantic_sim("zzz", "x", emb) == 0.5
    # mean("world cup") = (.5,.5,0), mean("cup tickets") = (0,.5,.5): cosine 1/2
    assert semantic_sim("world cup", "cup tickets", emb) == pytest.approx(0.75)


def test_embedding_round_trip(tmp_path, emb):
    emb.save(tmp_path / "e.txt")
    back = EmbeddingTable.load(tmp_path / "e.txt")
    assert back.dim == 3 and set(back.vectors) == set(emb.vectors)
    with pytest.raises(ValueError):
        EmbeddingTable({"a": [1.0], "b": [1.0, 2.0]})


def test_ap_single_point():
    res = affinity_propagation(np.array([[0.5]]))
    assert list(res.labels) == [0] and list(res.exemplars) == [0]


def _planted(n_a=4, n_b=4):
    n = n_a + n_b
    S = np.full((n, n), 0.1)
    S[:n_a, :n_a] = 0.9
    S[n_a:, n_a:] = 0.9
    np.fill_diagonal(S, 1.0)
    return S, np.array([0] * n_a + [1] * n_b)


def test_ap_two_planted_blobs():
    # preference = median of the full similarity matrix (self-similarity 1) = 0.5
    S, truth = _planted()
    np.fill_diagonal(S, np.median(S))
    res = affinity_propagation(S)
    assert len(res.exemplars) == 2
    assert len({(a, b) for a, b in zip(res.labels, truth)}) == 2


def test_ap_agrees_with_reference_when_preference_equals_cross_similarity():
    # the off-diagonal median equals the cross-blob similarity here, a tie that
    # message passing resolves into one cluster; the reference does the same
    sklearn_cluster = pytest.importorskip("sklearn.cluster")
    S, _ = _planted(4, 3)
    np.fill_diagonal(S, np.median(S[~np.eye(7, dtype=bool)]))
    ref = sklearn_cluster.AffinityPropagation(affinity="precomputed", damping=0.7,
                                              random_state=0).fit(S)
    ours = affinity_propagation(S)
    assert len(ours.exemplars) == len(ref.cluster_centers_indices_) == 1


def test_ap_matches_reference_implementation():
    sklearn_cluster = pytest.importorskip("sklearn.cluster")
    rng = np.random.default_rng(3)
    pts = np.concatenate([rng.normal(c, 0.3, size=(6, 2)) for c in ((0, 0), (5, 0), (0, 5))])
    S = -((pts[:, None] - pts[None]) ** 2).sum(-1)
    np.fill_diagonal(S, np.median(S[~np.eye(len(S), dtype=bool)]))
    ours = affinity_propagation(S, damping=0.7, max_iter=500)
    ref = sklearn_cluster.AffinityPropagation(affinity="precomputed", damping=0.7, max_iter=500,
                                              random_state=0).fit(S)
    assert sorted(ours.exemplars) == sorted(ref.cluster_centers_indices_)


def test_ap_all_equal_is_deterministic():
    S = np.full((5, 5), 0.4)
    a, b = affinity_propagation(S), affinity_propagation(S)
    assert len(set(a.labels)) in (1, 5)
    np.testing.assert_array_equal(a.labels, b.labels)
    with pytest.raises(ValueError):
        affinity_propagation(S, damping=0.3)


def test_extract_aspects_planted(emb):
    cands = [("e world cup tickets", 0.30), ("e world cup ticket", 0.25), ("e world cup tix", 0.05),
             ("e x y", 0.20), ("e x y z", 0.10), ("e xy", 0.04)]
    freq = {"e world cup tickets": 5, "e world cup ticket": 9, "e world cup tix": 1,
            "e x y": 3, "e x y z": 8, "e xy": 1}
    out = extract_aspects(cands, emb, 2, freq, strip=("e",))
    assert [a.text for a in out] == ["e world cup ticket", "e x y z"]
    assert extract_aspects([], emb, 2, {}) == []
    with pytest.raises(ValueError):
        extract_aspects(cands, emb, 0, freq)


def test_identical_candidates_form_one_cluster(emb):
    out = extract_aspects([("cup", 0.5), ("cup", 0.4), ("cup", 0.3)], emb, 5, {"cup": 2})
    assert len(out) == 1


_words = st.sampled_from(["world", "cup", "tickets", "ticket", "x", "y", "final", "the", "news"])
_texts = st.lists(_words, min_size=1, max_size=4).map(" ".join)


@settings(max_examples=40, deadline=None)
@given(st.lists(_texts, min_size=2, max_size=8))
def test_similarity_and_partition_properties(texts):
    emb = EmbeddingTable({"world": [1.0, 0.0], "cup": [0.0, 1.0], "x": [0.5, -1.0]})
    sm = similarity_matrix(texts, emb)
    V = sm.values
    np.testing.assert_allclose(V, V.T, atol=1e-12)
    off = V[~np.eye(len(texts), dtype=bool)]
    assert ((off >= 0) & (off <= 1)).all()
    raw = similarity_matrix(texts, emb, preference=1.0).values
    assert np.allclose(np.diag(raw), 1.0)
    res = affinity_propagation(sm)
    assert len(res.labels) == len(texts)
    assert set(res.labels) == set(range(len(res.exemplars)))


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_combination_monotone_in_lexical(lex, bump, sem, lam):
    lo = lam * lex + (1 - lam) * sem
    hi = lam * min(1.0, lex + bump) + (1 - lam) * sem
    assert hi >= lo - 1e-15
