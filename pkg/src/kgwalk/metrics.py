"""Ranking metrics, the ItemKNN and KGE baselines, and path-pattern statistics."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .graph import KIND_ABBREV, EntityKind, IntegratedGraph
from .kge import DistMult


def hit_ratio_at_k(recommended: Sequence, test_items, k: int) -> float | None:
    """|top-k ∩ test| / |test| for one user; ``None`` when the test set is empty."""
    if k < 1:
        raise ValueError("k must be >= 1")
    test_items = set(test_items)
    if not test_items:
        return None
    hits = len(set(list(recommended)[:k]) & test_items)
    return hits / len(test_items)


def ndcg_at_k(recommended: Sequence, test_items, k: int) -> float | None:
    if k < 1:
        raise ValueError("k must be >= 1")
    test_items = set(test_items)
    if not test_items:
        return None
    dcg = sum(1.0 / np.log2(rank + 1) for rank, item in enumerate(list(recommended)[:k], start=1) if item in test_items)
    idcg = sum(1.0 / np.log2(rank + 1) for rank in range(1, min(k, len(test_items)) + 1))
    return float(dcg / idcg)


def mean_metrics(lists: Mapping, test: Mapping, k: int) -> tuple[float, float]:
    """Average HR@k and NDCG@k over users that have a non-empty test set."""
    hrs, ndcgs = [], []
    for u, items in test.items():
        if not items:
            continue
        rec = lists.get(u, [])
        hrs.append(hit_ratio_at_k(rec, items, k))
        ndcgs.append(ndcg_at_k(rec, items, k))
    if not hrs:
        return 0.0, 0.0
    return float(np.mean(hrs)), float(np.mean(ndcgs))


@dataclass
class RunMetrics:
    hr: float
    ndcg: float
    users: int
    skipped: int


@dataclass
class MetricReport:
    model: str
    k: int
    runs: list[RunMetrics] = field(default_factory=list)

    @property
    def hr_at_k(self) -> float:
        return float(np.mean([r.hr for r in self.runs])) if self.runs else 0.0

    @property
    def ndcg_at_k(self) -> float:
        return float(np.mean([r.ndcg for r in self.runs])) if self.runs else 0.0

    def to_tsv(self) -> str:
        lines = ["run\tmodel\tk\thr\tndcg\tusers\tskipped"]
        for n, r in enumerate(self.runs):
            lines.append(f"{n}\t{self.model}\t{self.k}\t{r.hr:.6f}\t{r.ndcg:.6f}\t{r.users}\t{r.skipped}")
        lines.append(f"mean\t{self.model}\t{self.k}\t{self.hr_at_k:.6f}\t{self.ndcg_at_k:.6f}\t\t")
        return "\n".join(lines) + "\n"


def evaluate_lists(lists: Mapping, test: Mapping, k: int) -> RunMetrics:
    hr, ndcg = mean_metrics(lists, test, k)
    users = sum(1 for items in test.values() if items)
    return RunMetrics(hr, ndcg, users, len(test) - users)


def _top_k(scores: np.ndarray, candidates: np.ndarray, k: int) -> list[int]:
    order = np.lexsort((candidates, -scores))[:k]
    return candidates[order].tolist()


class ItemKNN:
    """Item-item cosine similarity over the binary training matrix."""

    def __init__(self, interactions: np.ndarray, items: np.ndarray):
        self.items = np.asarray(items, dtype=np.int64)
        self.col = {int(i): n for n, i in enumerate(self.items)}
        users, rows = np.unique(interactions[:, 0], return_inverse=True)
        self.row = {int(u): n for n, u in enumerate(users)}
        cols = np.array([self.col[int(i)] for i in interactions[:, 1]], dtype=np.int64)
        X = sparse.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(len(users), len(self.items))
        )
        X.data[:] = 1.0
        co = (X.T @ X).tocsr()
        norm = np.sqrt(co.diagonal())
        inv = np.divide(1.0, norm, out=np.zeros_like(norm), where=norm > 0)
        self.sim = sparse.diags(inv) @ co @ sparse.diags(inv)
        self.sim = sparse.csr_matrix(self.sim)
        self.history = {u: cols[rows == n] for u, n in self.row.items()}

    def similarity(self) -> np.ndarray:
        return self.sim.toarray()

    def scores(self, u: int) -> np.ndarray:
        hist = self.history.get(int(u))
        if hist is None or len(hist) == 0:
            return np.zeros(len(self.items))
        return np.asarray(self.sim[hist].sum(axis=0)).ravel()

    def recommend(self, u: int, k: int, exclusions=()) -> list[int]:
        hist = self.history.get(int(u))
        if hist is None or len(hist) == 0:
            return []
        scores = self.scores(u)
        keep = np.ones(len(self.items), dtype=bool)
        keep[hist] = False
        for e in exclusions:
            c = self.col.get(int(e))
            if c is not None:
                keep[c] = False
        return _top_k(scores[keep], self.items[keep], k)


def itemknn_recommend(u: int, graph: IntegratedGraph, k: int, exclusions=()) -> list[int]:
    return ItemKNN(graph.interactions, graph.items).recommend(u, k, exclusions)


def kge_rec_recommend(u: int, score_model: DistMult, items: np.ndarray, k: int, exclusions=()) -> list[int]:
    """Rank all items by psi(u, Interact, item), skipping ``exclusions``."""
    items = np.asarray(items, dtype=np.int64)
    if len(exclusions):
        items = items[~np.isin(items, np.fromiter(exclusions, dtype=np.int64))]
    return _top_k(score_model.user_scores(u, items), items, k)


def path_signature(rels: Sequence[int], ents: Sequence[int], graph: IntegratedGraph, kind_labels=None) -> str:
    """Kind/relation pattern of a walk, e.g. ``U→Interact→I→InteractedBy→U→Interact→I``.

    ``rels``/``ents`` include the starting (Start, user) pair, whose relation is omitted.
    """
    labels = kind_labels or KIND_ABBREV
    parts = [labels[EntityKind(int(graph.kinds[ents[0]]))]]
    for r, e in zip(rels[1:], ents[1:]):
        parts.append(graph.relation_name(r))
        parts.append(labels[EntityKind(int(graph.kinds[e]))])
    return "→".join(parts)


def path_pattern_stats(paths: Iterable, graph: IntegratedGraph, kind_labels=None) -> list[tuple[str, float]]:
    """Share (in percent) of each path signature among ``paths``, most frequent first.

    ``paths`` are objects with ``rels``/``ents`` (beam-search paths) or
    ``(rels, ents)`` pairs.
    """
    counts: Counter[str] = Counter()
    for p in paths:
        rels, ents = (p.rels, p.ents) if hasattr(p, "rels") else p
        counts[path_signature(rels, ents, graph, kind_labels)] += 1
    total = sum(counts.values())
    if not total:
        return []
    rows = [(sig, 100.0 * n / total) for sig, n in counts.items()]
    rows.sort(key=lambda x: (-x[1], x[0]))
    return rows


def patterns_to_tsv(rows: list[tuple[str, float]]) -> str:
    return "pattern\tpercentage\n" + "".join(f"{sig}\t{pct:.2f}\n" for sig, pct in rows)
