"""Raw-file ingestion: matching, KG filtering and the per-user 6:2:2 split."""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError
from .graph import IntegratedGraph, build_graph

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "valid", "test")


def read_tsv(path: str | Path, ncols: int) -> list[tuple[str, ...]]:
    """Read a UTF-8 TSV with exactly ``ncols`` fields per line.

    Blank lines and lines starting with ``#`` are skipped.
    """
    rows = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open: {exc.strerror}", path=str(path)) from None
    with fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != ncols or any(not p for p in parts):
                raise DataError(f"expected {ncols} non-empty tab-separated fields, got {line!r}", path=str(path), line=n)
            rows.append(tuple(parts))
    return rows


def write_tsv(path: str | Path, rows: Iterable[Iterable[object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")


def filter_triplets(triplets: Iterable[tuple[str, str, str]], item_entities) -> list[tuple[str, str, str]]:
    """Keep only triplets with at least one endpoint that is an item entity."""
    item_entities = set(item_entities)
    return [t for t in triplets if t[0] in item_entities or t[2] in item_entities]


def remove_unmatched_items(
    interactions: Iterable[tuple[str, str]], matched_items
) -> tuple[list[tuple[str, str]], list[str]]:
    """Drop interactions whose item has no KG match.

    Returns the surviving interactions and the users that lost all of theirs.
    """
    matched_items = set(matched_items)
    kept, seen, alive = [], OrderedDict(), set()
    for u, i in interactions:
        seen.setdefault(u, None)
        if i in matched_items:
            kept.append((u, i))
            alive.add(u)
    dropped = [u for u in seen if u not in alive]
    if dropped:
        log.info("dropped %d users with no matched items", len(dropped))
    return kept, dropped


def group_by_user(pairs: Iterable[tuple[str, str]]) -> "OrderedDict[str, list[str]]":
    """Per-user item lists in first-seen order, duplicates collapsed."""
    events: OrderedDict[str, list[str]] = OrderedDict()
    seen = set()
    for u, i in pairs:
        if (u, i) in seen:
            continue
        seen.add((u, i))
        events.setdefault(u, []).append(i)
    return events


@dataclass
class DatasetSplit:
    train: list[tuple[str, str]] = field(default_factory=list)
    valid: list[tuple[str, str]] = field(default_factory=list)
    test: list[tuple[str, str]] = field(default_factory=list)

    def by_user(self, name: str) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for u, i in getattr(self, name):
            out.setdefault(u, []).append(i)
        return out


def split_sizes(n: int) -> tuple[int, int, int]:
    # floor for held-out parts; train takes the remainder so it is never empty
    n_valid = int(np.floor(0.2 * n + 1e-9))
    n_test = n_valid
    return n - n_valid - n_test, n_valid, n_test


def split_interactions(events: Mapping[str, list[str]], seed: int) -> DatasetSplit:
    """Shuffle each user's events under ``seed`` and cut them 60/20/20."""
    rng = np.random.default_rng(seed)
    split = DatasetSplit()
    for u, items in events.items():
        items = list(dict.fromkeys(items))
        if not items:
            raise DataError(f"user {u!r} has no events")
        order = rng.permutation(len(items))
        n_train, n_valid, _ = split_sizes(len(items))
        shuffled = [items[k] for k in order]
        split.train.extend((u, i) for i in shuffled[:n_train])
        split.valid.extend((u, i) for i in shuffled[n_train : n_train + n_valid])
        split.test.extend((u, i) for i in shuffled[n_train + n_valid :])
    return split


@dataclass
class Dataset:
    """A split dataset whose KG triplets already use item labels for matched entities."""

    split: DatasetSplit
    triplets: list[tuple[str, str, str]]
    items: list[str]
    stats: dict = field(default_factory=dict)

    def build_graph(self, use_kg: bool = True, max_fanout: int = 512, fanout_seed: int = 0) -> IntegratedGraph:
        return build_graph(
            self.split.train,
            self.triplets if use_kg else (),
            items=self.items,
            max_fanout=max_fanout,
            fanout_seed=fanout_seed,
        )

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in SPLIT_NAMES:
            write_tsv(out / f"{name}.tsv", getattr(self.split, name))
        write_tsv(out / "kg.tsv", self.triplets)
        write_tsv(out / "items.tsv", ([i] for i in self.items))
        write_tsv(out / "stats.tsv", self.stats.items())

    @classmethod
    def load(cls, data_dir: str | Path) -> "Dataset":
        d = Path(data_dir)
        split = DatasetSplit(*(read_tsv(d / f"{name}.tsv", 2) for name in SPLIT_NAMES))
        triplets = read_tsv(d / "kg.tsv", 3)
        items = [row[0] for row in read_tsv(d / "items.tsv", 1)]
        stats = {}
        if (d / "stats.tsv").exists():
            stats = dict(read_tsv(d / "stats.tsv", 2))
        return cls(split, triplets, items, stats)


def dataset_stats(events: Mapping[str, list[str]], triplets, item_entities) -> dict:
    """Counts in the layout of a dataset-statistics table."""
    n_users = len(events)
    items = {i for its in events.values() for i in its}
    n_events = sum(len(v) for v in events.values())
    entities = set(item_entities)
    for h, _, t in triplets:
        entities.add(h)
        entities.add(t)
    sparsity = 1.0 - n_events / (n_users * len(items)) if n_users and items else 1.0
    return {
        "users": n_users,
        "items": len(items),
        "events": n_events,
        "sparsity": f"{100 * sparsity:.2f}%",
        "entities": len(entities),
        "relations": len({r for _, r, _ in triplets}),
        "triplets": len(triplets),
    }


def prepare_dataset(
    interactions: list[tuple[str, str]],
    triplets: list[tuple[str, str, str]],
    matches: list[tuple[str, str]],
    seed: int,
) -> Dataset:
    item_to_entity: dict[str, str] = {}
    for item, entity in matches:
        item_to_entity.setdefault(item, entity)

    kept, dropped = remove_unmatched_items(interactions, item_to_entity)
    events = group_by_user(kept)
    if not events:
        raise DataError("no interactions left after removing unmatched items")
    items = list(dict.fromkeys(i for its in events.values() for i in its))
    entity_to_item: dict[str, str] = {}
    for i in items:
        entity_to_item.setdefault(item_to_entity[i], i)

    kg = filter_triplets(triplets, entity_to_item)
    kg = list(dict.fromkeys(kg))
    stats = dataset_stats(events, kg, entity_to_item)
    stats["dropped_users"] = len(dropped)
    stats["dropped_triplets"] = len(triplets) - len(kg)

    relabel = [(entity_to_item.get(h, h), r, entity_to_item.get(t, t)) for h, r, t in kg]
    split = split_interactions(events, seed)
    return Dataset(split, relabel, items, stats)


def ingest(interactions_path, triplets_path, matches_path, out_dir, seed: int) -> Dataset:
    ds = prepare_dataset(
        read_tsv(interactions_path, 2),
        read_tsv(triplets_path, 3),
        read_tsv(matches_path, 2),
        seed,
    )
    ds.stats["seed"] = seed
    ds.save(out_dir)
    return ds
