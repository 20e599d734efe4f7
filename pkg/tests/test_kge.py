import math
import struct

import numpy as np
import pytest

from kgwalk.data import Dataset, DatasetSplit
from kgwalk.errors import ConfigError, DataError, TrainingError
from kgwalk.graph import INTERACT, EntityKind, build_graph
from kgwalk.kge import (
    KGE_MAGIC,
    DistMult,
    EmbeddingTable,
    KGEConfig,
    NegativeSampler,
    bce_loss_and_grads,
    distmult,
    make_score_model,
    train_kge,
    training_triples,
)


@pytest.mark.parametrize(
    "h, r, t, expected",
    [
        (np.ones(4), np.ones(4), np.ones(4), 4.0),
        ([1, 0], [0, 1], [1, 1], 0.0),
        ([0.5, 2], [2, 0.5], [1, 1], 2.0),
    ],
)
def test_distmult_examples(h, r, t, expected):
    assert distmult(np.array(h, float), np.array(r, float), np.array(t, float)) == pytest.approx(expected)


def test_distmult_symmetric_in_head_and_tail():
    rng = np.random.default_rng(0)
    for _ in range(50):
        h, r, t = rng.normal(size=(3, 7))
        assert distmult(h, r, t) == pytest.approx(distmult(t, r, h))


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


@pytest.mark.parametrize("psi, expected", [(0.0, 0.5), (math.log(3), 0.75)])
def test_shaping_score_values(psi, expected):
    # u=0, i=1; e_u * r_interact * e_i summed over one dimension gives psi
    E = np.array([[1.0], [psi]])
    R = np.zeros((4, 1))
    R[INTERACT] = 1.0
    assert DistMult(EmbeddingTable(E, R)).shaping_score(0, 1) == pytest.approx(expected)


def test_shaping_score_bounds():
    E = np.array([[30.0], [30.0], [-30.0]])
    R = np.ones((4, 1))
    m = DistMult(EmbeddingTable(E, R))
    assert 0.999 < m.shaping_score(0, 1) <= 1.0
    assert 0.0 <= m.shaping_score(0, 2) < 1e-3
    rng = np.random.default_rng(1)
    m = DistMult(EmbeddingTable(rng.normal(size=(5, 3)), rng.normal(size=(4, 3))))
    s = m.shaping_score(np.arange(5), np.arange(5)[::-1])
    assert np.all((s > 0) & (s < 1))


def test_single_triplet_loss_matches_hand_formula():
    E = np.array([[0.3, -0.2], [0.5, 0.1], [-0.4, 0.7]])
    R = np.array([[0.9, 1.1]])
    pos = np.array([[0, 0, 1]])
    neg = np.array([[[0, 0, 2]]])
    loss, _, _ = bce_loss_and_grads(E, R, pos, neg)
    sp = 0.3 * 0.9 * 0.5 + (-0.2) * 1.1 * 0.1
    sn = 0.3 * 0.9 * (-0.4) + (-0.2) * 1.1 * 0.7
    assert loss == pytest.approx(-math.log(_sigmoid(sp)) - math.log(1 - _sigmoid(sn)), rel=1e-12)


def _numeric_grad(f, X, eps=1e-6):
    g = np.zeros_like(X)
    it = np.nditer(X, flags=["multi_index"])
    for _ in it:
        k = it.multi_index
        old = X[k]
        X[k] = old + eps
        fp = f()
        X[k] = old - eps
        fm = f()
        X[k] = old
        g[k] = (fp - fm) / (2 * eps)
    return g


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_bce_gradients_finite_difference(seed):
    rng = np.random.default_rng(seed)
    E = rng.normal(size=(6, 4))
    R = rng.normal(size=(3, 4))
    pos = np.stack([rng.integers(6, size=3), rng.integers(3, size=3), rng.integers(6, size=3)], axis=1)
    neg = np.stack([rng.integers(6, size=(3, 2)), np.repeat(pos[:, None, 1], 2, 1), rng.integers(6, size=(3, 2))], axis=2)
    m = 3 * 3
    drop = {k: (rng.random((m, 4)) > 0.3) / 0.7 for k in "hrt"}
    _, dE, dR = bce_loss_and_grads(E, R, pos, neg, drop)
    f = lambda: bce_loss_and_grads(E, R, pos, neg, drop)[0]  # noqa: E731
    assert _rel_err(dE, _numeric_grad(f, E)) < 1e-6
    assert _rel_err(dR, _numeric_grad(f, R)) < 1e-6


def test_negatives_keep_kind(toy_graph):
    rng = np.random.default_rng(0)
    pos = training_triples(toy_graph)
    neg = NegativeSampler(toy_graph.kinds, rng).sample(pos, 16)
    k = toy_graph.kinds
    assert np.array_equal(k[neg[..., 0]], np.repeat(k[pos[:, None, 0]], 16, 1))
    assert np.array_equal(k[neg[..., 2]], np.repeat(k[pos[:, None, 2]], 16, 1))
    assert np.array_equal(neg[..., 1], np.repeat(pos[:, None, 1], 16, 1))


def test_training_triples_can_exclude_interactions(toy_graph):
    all_t = training_triples(toy_graph)
    kg_only = training_triples(toy_graph, include_interactions=False)
    assert len(kg_only) == 4  # two triplets and their inverses
    assert len(all_t) == len(kg_only) + 6


def test_zero_epochs_returns_initialization(toy_graph):
    cfg = KGEConfig(dim=8, epochs=0, seed=5)
    model, hist = train_kge(toy_graph, cfg)
    init = EmbeddingTable.initialize(toy_graph.num_entities, toy_graph.num_relations, 8, np.random.default_rng(5))
    assert hist == []
    assert np.array_equal(model.table.entity, init.entity)
    assert np.array_equal(model.table.relation, init.relation)
    assert np.all(np.abs(init.entity) <= 0.5 / 8)


def _filtered_tail_rank(E, R, triples, kinds):
    """Brute-force rank of each true tail among same-kind entities, other true tails filtered."""
    true = {tuple(x) for x in triples.tolist()}
    ranks = []
    for h, r, t in triples.tolist():
        cands = [e for e in range(len(E)) if kinds[e] == kinds[t]]
        s_true = float(np.sum(E[h] * R[r] * E[t]))
        better = sum(
            1 for e in cands if e != t and (h, r, e) not in true and float(np.sum(E[h] * R[r] * E[e])) > s_true
        )
        ranks.append(1 + better)
    return float(np.mean(ranks))


def test_training_improves_filtered_tail_rank():
    g = build_graph(
        [("u", "i0")],
        [("i0", "genre", "a0"), ("i1", "genre", "a1"), ("i2", "genre", "a2")],
        items=["i1", "i2"] + [f"i{k}" for k in range(3, 8)],
    )
    kg = training_triples(g, include_interactions=False)
    cfg = KGEConfig(dim=8, epochs=200, lr=1e-2, dropout=0.0, batch_size=16, seed=0)
    init = EmbeddingTable.initialize(g.num_entities, g.num_relations, 8, np.random.default_rng(0))
    before = _filtered_tail_rank(init.entity, init.relation, kg, g.kinds)
    model, hist = train_kge(g, cfg)
    after = _filtered_tail_rank(model.table.entity, model.table.relation, kg, g.kinds)
    assert after < before
    assert hist[-1] < hist[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(toy_graph):
    table = EmbeddingTable.initialize(toy_graph.num_entities, toy_graph.num_relations, 4, np.random.default_rng(0))
    table.entity[:] = np.inf
    with pytest.raises(TrainingError, match="loss"):
        train_kge(toy_graph, KGEConfig(dim=4, epochs=1, dropout=0.0), table=table)


def test_conve_is_config_error():
    with pytest.raises(ConfigError, match="not implemented"):
        make_score_model("conve", EmbeddingTable(np.zeros((1, 2)), np.zeros((1, 2))))
    with pytest.raises(ConfigError, match="unknown"):
        make_score_model("transe", EmbeddingTable(np.zeros((1, 2)), np.zeros((1, 2))))


def test_checkpoint_layout_and_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    t = EmbeddingTable(rng.normal(size=(5, 3)), rng.normal(size=(4, 3)))
    p = tmp_path / "kge.bin"
    t.save(p)
    raw = p.read_bytes()
    assert raw[:4] == KGE_MAGIC
    assert struct.unpack("<4I", raw[4:20]) == (1, 3, 5, 4)
    assert len(raw) == 20 + 4 * (5 + 4) * 3
    back = EmbeddingTable.load(p)
    assert np.allclose(back.entity, t.entity, atol=1e-6)
    assert np.allclose(back.relation, t.relation, atol=1e-6)
    p.write_bytes(raw[:-4])
    with pytest.raises(DataError, match="truncated"):
        EmbeddingTable.load(p)


def test_held_out_order_does_not_affect_training():
    train = [("u1", "i1"), ("u2", "i2"), ("u1", "i3")]
    test = [("u1", "i2"), ("u2", "i1"), ("u2", "i3")]
    cfg = KGEConfig(dim=4, epochs=5, seed=2)
    a = Dataset(DatasetSplit(train, [], test), [("i1", "r", "x")], ["i1", "i2", "i3"])
    b = Dataset(DatasetSplit(train, [], test[::-1]), [("i1", "r", "x")], ["i1", "i2", "i3"])
    ma, _ = train_kge(a.build_graph(), cfg)
    mb, _ = train_kge(b.build_graph(), cfg)
    assert np.array_equal(ma.table.entity, mb.table.entity)


def test_kinds_enum_values():
    assert [int(k) for k in EntityKind] == [0, 1, 2]
