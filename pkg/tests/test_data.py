import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgwalk.data import (
    Dataset,
    filter_triplets,
    group_by_user,
    ingest,
    read_tsv,
    remove_unmatched_items,
    split_interactions,
    split_sizes,
    write_tsv,
)
from kgwalk.errors import DataError


def test_filter_keeps_item_connected():
    trip = [("ie", "r", "x"), ("x", "r", "y"), ("y", "r", "ie")]
    assert filter_triplets(trip, {"ie"}) == [("ie", "r", "x"), ("y", "r", "ie")]


def test_filter_chain_keeps_first_hop_only():
    chain = [("ie", "r", "a"), ("a", "r", "b")]
    assert filter_triplets(chain, {"ie"}) == [("ie", "r", "a")]


@settings(max_examples=50)
@given(st.lists(st.tuples(st.sampled_from("abcde"), st.just("r"), st.sampled_from("abcde"))), st.sets(st.sampled_from("abcde")))
def test_filter_idempotent(trip, items):
    once = filter_triplets(trip, items)
    assert filter_triplets(once, items) == once


@pytest.mark.parametrize("n, expected", [(10, (6, 2, 2)), (1, (1, 0, 0)), (5, (3, 1, 1)), (4, (4, 0, 0))])
def test_split_sizes(n, expected):
    assert split_sizes(n) == expected


def test_split_ten_events():
    s = split_interactions({"u": [f"i{k}" for k in range(10)]}, seed=0)
    assert (len(s.train), len(s.valid), len(s.test)) == (6, 2, 2)


@settings(max_examples=50)
@given(st.dictionaries(st.sampled_from("uvwxyz"), st.lists(st.sampled_from("abcdefghijkl"), min_size=1, max_size=12), min_size=1), st.integers(0, 1000))
def test_split_partitions_each_user(events, seed):
    s = split_interactions(events, seed)
    assert s == split_interactions(events, seed)
    for u, items in events.items():
        parts = [set(s.by_user(n).get(u, [])) for n in ("train", "valid", "test")]
        assert set.union(*parts) == set(items)
        assert sum(len(p) for p in parts) == len(set(items))
        assert tuple(len(p) for p in parts) == split_sizes(len(set(items)))


def test_remove_unmatched():
    kept, dropped = remove_unmatched_items([("u", "a"), ("u", "b"), ("v", "b")], {"a"})
    assert kept == [("u", "a")]
    assert dropped == ["v"]


def test_group_collapses_duplicates():
    assert group_by_user([("u", "a"), ("u", "a"), ("u", "b")]) == {"u": ["a", "b"]}


def test_read_tsv_reports_line(tmp_path):
    p = tmp_path / "x.tsv"
    p.write_text("# header\nu\ti\n\nu only\n", encoding="utf-8")
    with pytest.raises(DataError, match=r"x.tsv:4"):
        read_tsv(p, 2)


def test_read_tsv_missing(tmp_path):
    with pytest.raises(DataError, match="cannot open"):
        read_tsv(tmp_path / "none.tsv", 2)


def _raw(tmp_path):
    inter = [(f"u{u}", f"m{m}") for u in range(4) for m in range(6) if (u + m) % 3]
    inter.append(("u9", "unmatched"))
    write_tsv(tmp_path / "inter.tsv", inter)
    write_tsv(tmp_path / "kg.tsv", [("e_m0", "dir", "bob"), ("e_m1", "dir", "bob"), ("bob", "born", "paris"), ("x", "r", "y")])
    write_tsv(tmp_path / "match.tsv", [(f"m{m}", f"e_m{m}") for m in range(6)])
    return tmp_path / "inter.tsv", tmp_path / "kg.tsv", tmp_path / "match.tsv"


def test_ingest_end_to_end(tmp_path):
    paths = _raw(tmp_path)
    ds = ingest(*paths, tmp_path / "out", seed=1)
    assert ds.stats["users"] == 4
    assert ds.stats["dropped_users"] == 1
    assert ds.stats["triplets"] == 2
    # matched entities take the item label
    assert ("m0", "dir", "bob") in ds.triplets
    for name in ("train", "valid", "test", "kg", "items", "stats"):
        assert (tmp_path / "out" / f"{name}.tsv").exists()
    back = Dataset.load(tmp_path / "out")
    assert back.split == ds.split
    assert back.triplets == ds.triplets
    g = back.build_graph()
    # held-out pairs never become edges
    for u, i in back.split.test:
        assert not g.is_interaction(g.entity_id(u), g.entity_id(i))


def test_ingest_deterministic(tmp_path):
    paths = _raw(tmp_path)
    a = ingest(*paths, tmp_path / "a", seed=3)
    b = ingest(*paths, tmp_path / "b", seed=3)
    assert a.split == b.split
    assert (tmp_path / "a" / "train.tsv").read_bytes() == (tmp_path / "b" / "train.tsv").read_bytes()


def test_no_kg_graph_keeps_interactions(tmp_path):
    ds = ingest(*_raw(tmp_path), tmp_path / "out", seed=0)
    g = ds.build_graph(use_kg=False)
    assert len(g.attributes) == 0
    assert len(g.interactions) == len(ds.split.train)
