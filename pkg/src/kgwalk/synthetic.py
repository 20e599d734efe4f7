"""Synthetic datasets with a planted User→Item→Attribute→Item pattern."""
from __future__ import annotations

from collections import deque

import numpy as np

from .data import Dataset, DatasetSplit
from .graph import IntegratedGraph


def planted_dataset(
    n_users: int = 30,
    n_items: int = 40,
    n_attrs: int = 20,
    n_groups: int = 3,
    noise_per_user: int = 4,
    seed: int = 0,
    max_tries: int = 1000,
) -> Dataset:
    """Users in groups that share one anchor item; each group's held-out item is linked
    to the anchor only through the group's attributes.

    Items are ``n_groups`` anchors, ``n_groups`` held-out targets and noise
    items without KG facts. Every user trains on its group anchor plus
    ``noise_per_user`` random noise items and is tested on its group's target.
    No user trains on a target, so the only walks of length <= 3 from a user
    to its target go user -> anchor -> attribute -> target.
    """
    n_noise = n_items - 2 * n_groups
    if n_noise < noise_per_user or n_attrs < n_groups or n_users < n_groups:
        raise ValueError("fixture too small for the requested groups")
    rng = np.random.default_rng(seed)
    noise = [f"noise{j}" for j in range(n_noise)]
    for _ in range(max_tries):
        train, test, triplets = [], [], []
        for a in range(n_attrs):
            g = a % n_groups
            triplets.append((f"anchor{g}", "has_attr", f"attr{a}"))
            triplets.append((f"target{g}", "has_attr", f"attr{a}"))
        for n in range(n_users):
            g = n % n_groups
            u = f"user{n}"
            train.append((u, f"anchor{g}"))
            for j in rng.choice(n_noise, size=noise_per_user, replace=False):
                train.append((u, noise[j]))
            test.append((u, f"target{g}"))
        # every noise item needs a user, otherwise it is not an item of the dataset
        if {i for _, i in train} >= set(noise):
            break
    else:
        raise RuntimeError("could not place every noise item")
    items = [f"anchor{g}" for g in range(n_groups)] + [f"target{g}" for g in range(n_groups)] + noise
    return Dataset(DatasetSplit(train=train, valid=[], test=test), triplets, items)


def reaching_relation_paths(graph: IntegratedGraph, u: int, target: int, horizon: int) -> set[tuple[int, ...]]:
    """Relation sequences (self-loops removed) of all walks of length ``horizon`` from ``u`` ending at ``target``."""
    found = set()
    queue = deque([(u, ())])
    for _ in range(horizon):
        nxt = deque()
        while queue:
            e, rels = queue.popleft()
            for r, e2 in graph.neighbors(e):
                nxt.append((e2, rels + (r,)))
        queue = nxt
    for e, rels in queue:
        if e == target:
            found.add(tuple(r for r in rels if r != 1))
    return found
