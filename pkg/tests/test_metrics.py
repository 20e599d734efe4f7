import math

import numpy as np
import pytest

from kgwalk.graph import INTERACT, INTERACTED_BY, SELF_LOOP, START, build_graph
from kgwalk.kge import DistMult, EmbeddingTable
from kgwalk.metrics import (
    ItemKNN,
    MetricReport,
    RunMetrics,
    evaluate_lists,
    hit_ratio_at_k,
    itemknn_recommend,
    kge_rec_recommend,
    mean_metrics,
    ndcg_at_k,
    path_pattern_stats,
    path_signature,
    patterns_to_tsv,
)


def brute_hr(rec, test, k):
    top = rec[:k]
    return sum(1 for t in test if t in top) / len(test)


def brute_ndcg(rec, test, k):
    dcg = 0.0
    for pos in range(min(k, len(rec))):
        if rec[pos] in test:
            dcg += 1.0 / math.log2(pos + 2)
    idcg = sum(1.0 / math.log2(pos + 2) for pos in range(min(k, len(test))))
    return dcg / idcg


def test_forced_values():
    assert hit_ratio_at_k([7, 1, 2], {7}, 10) == 1.0
    assert hit_ratio_at_k(list(range(10)) + [99], {99}, 10) == 0.0
    assert hit_ratio_at_k([5, 6, 1], {1, 42}, 10) == 0.5
    assert ndcg_at_k([3, 1], {3}, 10) == 1.0
    assert ndcg_at_k([0, 1, 9], {9}, 10) == pytest.approx(0.5)
    assert ndcg_at_k([4, 5, 6], {4, 5}, 10) == pytest.approx(1.0)


def test_empty_test_set_skipped():
    assert hit_ratio_at_k([1], set(), 10) is None
    assert ndcg_at_k([1], set(), 10) is None
    with pytest.raises(ValueError):
        hit_ratio_at_k([1], {1}, 0)
    m = evaluate_lists({1: [5], 2: [6]}, {1: {5}, 2: set()}, 10)
    assert (m.hr, m.users, m.skipped) == (1.0, 1, 1)


def test_agrees_with_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        rec = list(rng.permutation(40)[:n])
        test = set(rng.choice(40, size=int(rng.integers(1, 6)), replace=False).tolist())
        k = int(rng.integers(1, 15))
        assert hit_ratio_at_k(rec, test, k) == brute_hr(rec, test, k)
        assert ndcg_at_k(rec, test, k) == pytest.approx(brute_ndcg(rec, test, k), abs=1e-12)
        nd = ndcg_at_k(rec, test, k)
        assert 0.0 <= nd <= 1.0 + 1e-12


def test_ndcg_one_iff_ideal_prefix():
    assert ndcg_at_k([1, 2, 3], {1, 2}, 10) == pytest.approx(1.0)
    assert ndcg_at_k([1, 3, 2], {1, 2}, 10) < 1.0


def test_report_mean_and_tsv():
    r = MetricReport("ekar", 10, [RunMetrics(0.5, 0.25, 4, 1), RunMetrics(1.0, 0.75, 4, 1)])
    assert r.hr_at_k == pytest.approx(0.75)
    assert r.ndcg_at_k == pytest.approx(0.5)
    lines = r.to_tsv().splitlines()
    assert lines[0] == "run\tmodel\tk\thr\tndcg\tusers\tskipped"
    assert lines[1] == "0\tekar\t10\t0.500000\t0.250000\t4\t1"
    assert lines[-1].startswith("mean\tekar\t10\t0.750000\t0.500000")


def test_mean_metrics_ignores_users_without_test():
    hr, nd = mean_metrics({1: [3], 2: [9]}, {1: {3}, 2: {4}, 3: set()}, 5)
    assert hr == 0.5 and nd == 0.5


def dense_cosine(X):
    norms = np.linalg.norm(X, axis=0)
    out = np.zeros((X.shape[1], X.shape[1]))
    for a in range(X.shape[1]):
        for b in range(X.shape[1]):
            if norms[a] and norms[b]:
                out[a, b] = X[:, a] @ X[:, b] / (norms[a] * norms[b])
    return out


def test_itemknn_similarity_matches_dense_oracle():
    rng = np.random.default_rng(0)
    X = (rng.random((6, 5)) < 0.5).astype(float)
    X[:, 4] = 0  # an item nobody has
    pairs = np.argwhere(X)
    knn = ItemKNN(pairs, np.arange(5))
    S = knn.similarity()
    assert np.allclose(S, dense_cosine(X[np.unique(pairs[:, 0])]))
    assert np.allclose(S, S.T)
    support = X.sum(axis=0) > 0
    assert np.allclose(np.diag(S)[support], 1.0)


def test_itemknn_examples():
    g = build_graph([("A", "x"), ("A", "y"), ("A", "extra"), ("B", "x"), ("B", "y"), ("C", "lonely")])
    B = g.entity_id("B")
    rec = itemknn_recommend(B, g, 3)
    assert rec[0] == g.entity_id("extra")
    assert g.entity_id("x") not in rec and g.entity_id("y") not in rec
    knn = ItemKNN(g.interactions, g.items)
    col = knn.col[g.entity_id("lonely")]
    assert knn.scores(B)[col] == 0.0
    assert knn.recommend(g.entity_id("x"), 3) == []  # not a user with history


def test_kge_rec_brute_force_and_exclusions():
    rng = np.random.default_rng(1)
    E = rng.normal(size=(12, 4))
    R = rng.normal(size=(4, 4))
    model = DistMult(EmbeddingTable(E, R))
    items = np.arange(2, 12)
    u = 0
    psi = {i: float(np.sum(E[u] * R[INTERACT] * E[i])) for i in items}
    best = max(psi, key=psi.get)
    rec = kge_rec_recommend(u, model, items, 3)
    assert rec[0] == best
    assert rec == sorted(psi, key=lambda i: -psi[i])[:3]
    assert best not in kge_rec_recommend(u, model, items, 3, exclusions={best})


def test_kge_rec_random_embeddings_hit_rate_near_chance():
    n_items, k, trials = 50, 10, 400
    items = np.arange(1, n_items + 1)
    hits = []
    for s in range(trials):
        rng = np.random.default_rng(s)
        model = DistMult(EmbeddingTable(rng.normal(size=(n_items + 1, 8)), rng.normal(size=(4, 8))))
        target = int(rng.integers(1, n_items + 1))
        hits.append(hit_ratio_at_k(kge_rec_recommend(0, model, items, k), {target}, k))
    p = k / n_items
    assert abs(np.mean(hits) - p) < 3 * math.sqrt(p * (1 - p) / trials)


def test_path_patterns(toy_graph):
    g = toy_graph
    u1, u2 = g.entity_id("u1"), g.entity_id("u2")
    i1, i2 = g.entity_id("i1"), g.entity_id("i2")
    walk = ([START, INTERACT, INTERACTED_BY, INTERACT], [u2, i2, u1, i1])
    assert path_signature(*walk, g) == "U→Interact→I→InteractedBy→U→Interact→I"
    stats = path_pattern_stats([walk, walk], g)
    assert stats == [("U→Interact→I→InteractedBy→U→Interact→I", 100.0)]
    loop = ([START, INTERACT, SELF_LOOP], [u1, i1, i1])
    mixed = path_pattern_stats([walk, loop, loop], g)
    assert mixed[0] == ("U→Interact→I→SelfLoop→I", pytest.approx(200 / 3))
    assert sum(p for _, p in mixed) == pytest.approx(100.0)
    assert patterns_to_tsv(mixed).splitlines()[0] == "pattern\tpercentage"
    assert path_pattern_stats([], g) == []
