"""Integrated user-item-entity graph.

Vertices are users, items and knowledge-graph attribute entities packed into
one dense id space. Every stored edge has its inverse stored as well, and every
vertex carries a self-loop that doubles as the agent's stop action. Only
training interactions become ``Interact`` edges.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

GRAPH_FORMAT = "kgwalk-graph"
GRAPH_VERSION = 1

# Reserved relation ids. KG relations start at 4 and come in (r, r^-1) pairs,
# so the inverse of any id >= 2 is ``id ^ 1``.
START = 0
SELF_LOOP = 1
INTERACT = 2
INTERACTED_BY = 3
RESERVED_RELATIONS = ("Start", "SelfLoop", "Interact", "InteractedBy")


class EntityKind(IntEnum):
    USER = 0
    ITEM = 1
    ATTRIBUTE = 2


KIND_ABBREV = {EntityKind.USER: "U", EntityKind.ITEM: "I", EntityKind.ATTRIBUTE: "A"}


def inverse_relation(r: int) -> int:
    if r < 2:
        return r
    return r ^ 1


@dataclass(frozen=True)
class Triplet:
    head: int
    relation: int
    tail: int


class _Interner:
    def __init__(self):
        self.labels: list[str] = []
        self.index: dict[str, int] = {}

    def add(self, label: str) -> int:
        idx = self.index.get(label)
        if idx is None:
            idx = len(self.labels)
            self.index[label] = idx
            self.labels.append(label)
        return idx


class IntegratedGraph:
    """Immutable CSR adjacency over G' with kind tags and the training interaction set."""

    def __init__(
        self,
        entity_labels: Sequence[str],
        relation_labels: Sequence[str],
        kinds: np.ndarray,
        offsets: np.ndarray,
        nbr_rel: np.ndarray,
        nbr_ent: np.ndarray,
        interactions: np.ndarray,
        max_fanout: int = 512,
        fanout_seed: int = 0,
        report: dict | None = None,
    ):
        self.entity_labels = list(entity_labels)
        self.relation_labels = list(relation_labels)
        self.entity_index = {lab: i for i, lab in enumerate(self.entity_labels)}
        self.relation_index = {lab: i for i, lab in enumerate(self.relation_labels)}
        self.kinds = np.asarray(kinds, dtype=np.int8)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.nbr_rel = np.asarray(nbr_rel, dtype=np.int64)
        self.nbr_ent = np.asarray(nbr_ent, dtype=np.int64)
        for arr in (self.kinds, self.offsets, self.nbr_rel, self.nbr_ent):
            arr.flags.writeable = False
        self.interactions = np.asarray(interactions, dtype=np.int64).reshape(-1, 2)
        self.max_fanout = int(max_fanout)
        self.fanout_seed = int(fanout_seed)
        self.report = dict(report or {})

        self._interaction_set = {(int(u), int(i)) for u, i in self.interactions}
        self._user_items: dict[int, np.ndarray] = {}
        if len(self.interactions):
            order = np.lexsort((self.interactions[:, 1], self.interactions[:, 0]))
            pairs = self.interactions[order]
            users, starts = np.unique(pairs[:, 0], return_index=True)
            bounds = list(starts[1:]) + [len(pairs)]
            for u, s, e in zip(users, starts, bounds):
                self._user_items[int(u)] = pairs[s:e, 1].copy()
        self._fixed_sample: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # -- sizes and vocabularies -------------------------------------------

    @property
    def num_entities(self) -> int:
        return len(self.entity_labels)

    @property
    def num_relations(self) -> int:
        return len(self.relation_labels)

    @property
    def num_edges(self) -> int:
        return len(self.nbr_ent)

    @property
    def users(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == EntityKind.USER)

    @property
    def items(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == EntityKind.ITEM)

    @property
    def attributes(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == EntityKind.ATTRIBUTE)

    def kind(self, e: int) -> EntityKind:
        self._check(e)
        return EntityKind(int(self.kinds[e]))

    def is_item(self, e: int) -> bool:
        return 0 <= e < self.num_entities and self.kinds[e] == EntityKind.ITEM

    def entity_id(self, label: str) -> int:
        try:
            return self.entity_index[label]
        except KeyError:
            raise KeyError(f"unknown entity label {label!r}") from None

    def relation_id(self, label: str) -> int:
        try:
            return self.relation_index[label]
        except KeyError:
            raise KeyError(f"unknown relation label {label!r}") from None

    def inverse(self, r: int) -> int:
        return inverse_relation(r)

    # -- adjacency --------------------------------------------------------

    def _check(self, e: int) -> None:
        if not 0 <= e < self.num_entities:
            raise KeyError(f"entity id {e} not in graph (|V'| = {self.num_entities})")

    def neighbor_arrays(self, e: int) -> tuple[np.ndarray, np.ndarray]:
        """Full (relations, entities) of ``e``, sorted, self-loop included. Read-only views."""
        self._check(e)
        lo, hi = self.offsets[e], self.offsets[e + 1]
        return self.nbr_rel[lo:hi], self.nbr_ent[lo:hi]

    def neighbors(self, e: int) -> list[tuple[int, int]]:
        rel, ent = self.neighbor_arrays(e)
        return list(zip(rel.tolist(), ent.tolist()))

    def degree(self, e: int) -> int:
        self._check(e)
        return int(self.offsets[e + 1] - self.offsets[e])

    def actions(self, e: int, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Action set of ``e`` after the fan-out cap.

        Vertices with more than ``max_fanout`` neighbors keep their self-loop plus
        a uniform sample of the rest: redrawn from ``rng`` when one is given
        (training), otherwise a fixed per-vertex sample (inference).
        """
        rel, ent = self.neighbor_arrays(e)
        if len(ent) <= self.max_fanout:
            return rel, ent
        if rng is None:
            cached = self._fixed_sample.get(e)
            if cached is None:
                cached = self._sample(rel, ent, np.random.default_rng([self.fanout_seed, e]))
                self._fixed_sample[e] = cached
            return cached
        return self._sample(rel, ent, rng)

    def _sample(self, rel, ent, rng):
        loop = np.flatnonzero(rel == SELF_LOOP)
        others = np.flatnonzero(rel != SELF_LOOP)
        keep = rng.choice(others, size=self.max_fanout - len(loop), replace=False)
        idx = np.sort(np.concatenate([loop, keep]))
        return rel[idx], ent[idx]

    def edge_arrays(self, include_self_loops: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All stored edges as parallel (head, relation, tail) arrays."""
        heads = np.repeat(np.arange(self.num_entities), np.diff(self.offsets))
        rel, tail = self.nbr_rel, self.nbr_ent
        if not include_self_loops:
            keep = rel != SELF_LOOP
            return heads[keep], rel[keep], tail[keep]
        return heads, rel.copy(), tail.copy()

    # -- interactions -----------------------------------------------------

    def is_interaction(self, u: int, i: int) -> bool:
        return (int(u), int(i)) in self._interaction_set

    def user_items(self, u: int) -> np.ndarray:
        return self._user_items.get(int(u), np.empty(0, dtype=np.int64))

    # -- presentation -----------------------------------------------------

    def relation_name(self, r: int) -> str:
        return self.relation_labels[r]

    def entity_name(self, e: int) -> str:
        return self.entity_labels[e]

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write an ``.npz`` snapshot; ``format``/``version`` entries act as the header."""
        meta = {
            "entity_labels": self.entity_labels,
            "relation_labels": self.relation_labels,
            "max_fanout": self.max_fanout,
            "fanout_seed": self.fanout_seed,
            "report": self.report,
        }
        with open(path, "wb") as fh:
            np.savez(
                fh,
                format=np.array(GRAPH_FORMAT),
                version=np.array(GRAPH_VERSION, dtype=np.int64),
                meta=np.array(json.dumps(meta, sort_keys=True)),
                kinds=self.kinds,
                offsets=self.offsets,
                nbr_rel=self.nbr_rel,
                nbr_ent=self.nbr_ent,
                interactions=self.interactions,
            )

    @classmethod
    def load(cls, path: str | Path) -> "IntegratedGraph":
        with np.load(path, allow_pickle=False) as z:
            if "format" not in z or str(z["format"]) != GRAPH_FORMAT:
                raise DataError("not a graph snapshot", path=str(path))
            version = int(z["version"])
            if version != GRAPH_VERSION:
                raise DataError(f"unsupported graph snapshot version {version}", path=str(path))
            meta = json.loads(str(z["meta"]))
            return cls(
                meta["entity_labels"],
                meta["relation_labels"],
                z["kinds"],
                z["offsets"],
                z["nbr_rel"],
                z["nbr_ent"],
                z["interactions"],
                max_fanout=meta["max_fanout"],
                fanout_seed=meta["fanout_seed"],
                report=meta["report"],
            )


def inverse_label(label: str) -> str:
    return label + "_inv"


def build_graph(
    interactions: Iterable[tuple[str, str]],
    triplets: Iterable[tuple[str, str, str]] = (),
    items: Iterable[str] = (),
    max_fanout: int = 512,
    fanout_seed: int = 0,
) -> IntegratedGraph:
    """Merge training interactions and item-linked KG triplets into G'.

    ``interactions`` are (user_label, item_label) training pairs. ``items`` lists
    further item labels (held-out or KG-only items) that must be typed as items
    even without a training edge. Triplet endpoints that coincide with an item
    label are that item's vertex; any other KG label becomes an attribute.
    """
    interactions = list(interactions)
    if not interactions:
        raise DataError("no training interactions")

    ents = _Interner()
    kinds: list[int] = []
    rels = _Interner()
    for name in RESERVED_RELATIONS:
        rels.add(name)

    def add_entity(label, kind):
        n = len(ents.labels)
        idx = ents.add(label)
        if idx == n:
            kinds.append(kind)
        elif kinds[idx] != kind:
            raise DataError(
                f"label {label!r} used both as {EntityKind(kinds[idx]).name} and {EntityKind(kind).name}"
            )
        return idx

    pairs = []
    for n, (u, i) in enumerate(interactions, start=1):
        try:
            pairs.append((add_entity(u, EntityKind.USER), add_entity(i, EntityKind.ITEM)))
        except DataError as exc:
            raise DataError(str(exc), line=n) from None
    for i in items:
        add_entity(i, EntityKind.ITEM)

    heads, rel_ids, tails = [], [], []
    for n, (h, r, t) in enumerate(triplets, start=1):
        hid = ents.index.get(h)
        tid = ents.index.get(t)
        for label, idx in ((h, hid), (t, tid)):
            if idx is not None and kinds[idx] == EntityKind.USER:
                raise DataError(f"triplet endpoint {label!r} is a user", line=n)
        if hid is None:
            hid = add_entity(h, EntityKind.ATTRIBUTE)
        if tid is None:
            tid = add_entity(t, EntityKind.ATTRIBUTE)
        if r in RESERVED_RELATIONS:
            raise DataError(f"relation label {r!r} is reserved", line=n)
        rid = rels.index.get(r)
        if rid is None:
            if inverse_label(r) in rels.index:
                raise DataError(f"relation label {r!r} collides with a generated inverse", line=n)
            rid = rels.add(r)
            rels.add(inverse_label(r))
        elif rid % 2 == 1:
            raise DataError(f"relation label {r!r} collides with a generated inverse", line=n)
        heads.append(hid)
        rel_ids.append(rid)
        tails.append(tid)

    n_ent = len(ents.labels)
    pair_arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    h = np.concatenate([pair_arr[:, 0], np.array(heads, dtype=np.int64)])
    r = np.concatenate([np.full(len(pair_arr), INTERACT, dtype=np.int64), np.array(rel_ids, dtype=np.int64)])
    t = np.concatenate([pair_arr[:, 1], np.array(tails, dtype=np.int64)])

    n_rel = len(rels.labels)
    key = (h * n_rel + r) * n_ent + t
    _, first = np.unique(key, return_index=True)
    first.sort()
    duplicate_edges = len(key) - len(first)
    h, r, t = h[first], r[first], t[first]

    uniq_pairs = np.unique(pair_arr, axis=0)
    loops = np.arange(n_ent, dtype=np.int64)
    all_h = np.concatenate([h, t, loops])
    all_r = np.concatenate([r, r ^ 1, np.full(n_ent, SELF_LOOP, dtype=np.int64)])
    all_t = np.concatenate([t, h, loops])
    # inverse of an input edge may coincide with another input edge
    key = (all_h * n_rel + all_r) * n_ent + all_t
    _, keep = np.unique(key, return_index=True)
    all_h, all_r, all_t = all_h[keep], all_r[keep], all_t[keep]

    order = np.lexsort((all_t, all_r, all_h))
    all_h, all_r, all_t = all_h[order], all_r[order], all_t[order]
    offsets = np.zeros(n_ent + 1, dtype=np.int64)
    np.cumsum(np.bincount(all_h, minlength=n_ent), out=offsets[1:])

    report = {
        "duplicate_edges": int(duplicate_edges),
        "interactions": int(len(uniq_pairs)),
        "triplets": int(len(h) - len(uniq_pairs)),
    }
    return IntegratedGraph(
        ents.labels,
        rels.labels,
        np.array(kinds, dtype=np.int8),
        offsets,
        all_r,
        all_t,
        uniq_pairs,
        max_fanout=max_fanout,
        fanout_seed=fanout_seed,
        report=report,
    )
