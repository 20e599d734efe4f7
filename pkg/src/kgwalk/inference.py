"""Beam-search path generation and the two ranking strategies."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.special import expit

from .graph import SELF_LOOP, START, IntegratedGraph
from .kge import DistMult
from .policy import Policy, lstm_cell, log_softmax, pad_actions

STRATEGIES = ("path", "reward")


@dataclass(frozen=True)
class ScoredPath:
    rels: tuple[int, ...]
    ents: tuple[int, ...]
    log_prob: float
    # cumulative log-prob after each step, len T
    cumulative: tuple[float, ...] = ()

    @property
    def user(self) -> int:
        return self.ents[0]

    @property
    def terminal(self) -> int:
        return self.ents[-1]

    def steps(self) -> list[tuple[int, int]]:
        return list(zip(self.rels[1:], self.ents[1:]))

    def explanation(self) -> list[tuple[int, int]]:
        """Steps after the user with self-loops removed."""
        return [(r, e) for r, e in self.steps() if r != SELF_LOOP]


def beam_search(u: int, horizon: int, beam_width: int, graph: IntegratedGraph, policy: Policy) -> list[ScoredPath]:
    """Breadth-synchronous beam search from user ``u``.

    Keeps the ``beam_width`` best partial paths by cumulative log-prob after
    every step; ties go to the lexicographically smaller entity sequence, then
    relation sequence. Returns the surviving length-``horizon`` paths, best first.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    P = policy.params
    rel = np.array([[START]], dtype=np.int64)
    ent = np.array([[u]], dtype=np.int64)
    score = np.zeros(1)
    cum = np.zeros((1, 0))
    h, c, _ = lstm_cell(P["W"], P["b"], policy.action_embedding(rel[:, 0], ent[:, 0]), np.zeros((1, policy.hidden)), np.zeros((1, policy.hidden)))
    for t in range(horizon):
        y = policy.query(h)
        cr, ce, valid = pad_actions(graph, ent[:, -1])
        lp = log_softmax(np.einsum("bad,bd->ba", policy.action_embedding(cr, ce), y), valid)
        beam_idx, col = np.nonzero(valid)
        total = score[beam_idx] + lp[beam_idx, col]
        new_rel = np.concatenate([rel[beam_idx], cr[beam_idx, col][:, None]], axis=1)
        new_ent = np.concatenate([ent[beam_idx], ce[beam_idx, col][:, None]], axis=1)
        # np.lexsort: last key is primary
        keys = [new_rel[:, j] for j in reversed(range(new_rel.shape[1]))]
        keys += [new_ent[:, j] for j in reversed(range(new_ent.shape[1]))]
        keys.append(-total)
        order = np.lexsort(keys)[:beam_width]
        beam_idx = beam_idx[order]
        rel, ent, score = new_rel[order], new_ent[order], total[order]
        cum = np.concatenate([cum[beam_idx], score[:, None]], axis=1)
        if t + 1 < horizon:
            x = policy.action_embedding(rel[:, -1], ent[:, -1])
            h, c, _ = lstm_cell(P["W"], P["b"], x, h[beam_idx], c[beam_idx])
    return [
        ScoredPath(tuple(r.tolist()), tuple(e.tolist()), float(s), tuple(cm.tolist()))
        for r, e, s, cm in zip(rel, ent, score, cum)
    ]


def dedup(paths: Iterable[ScoredPath], graph: IntegratedGraph) -> list[ScoredPath]:
    """One path per terminal item, the most probable one; non-item terminals dropped."""
    best: dict[int, ScoredPath] = {}
    for p in paths:
        if not graph.is_item(p.terminal):
            continue
        cur = best.get(p.terminal)
        if cur is None or p.log_prob > cur.log_prob:
            best[p.terminal] = p
    return sorted(best.values(), key=lambda p: (-p.log_prob, p.terminal))


@dataclass
class Recommendation:
    item: int
    score: float
    path: ScoredPath


@dataclass
class RecommendationList:
    user: int
    k: int
    entries: list[Recommendation] = field(default_factory=list)

    @property
    def short(self) -> bool:
        return len(self.entries) < self.k

    @property
    def items(self) -> list[int]:
        return [e.item for e in self.entries]


def rank(
    paths: Iterable[ScoredPath],
    strategy: str,
    score_model: DistMult | None,
    u: int,
    k: int,
    exclusions=(),
) -> RecommendationList:
    """Order deduplicated paths by path probability ("path") or sigmoid(psi(u, item)) ("reward")."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    exclusions = set(exclusions)
    paths = [p for p in paths if p.terminal not in exclusions]
    if strategy == "path":
        keyed = [(p.log_prob, float(np.exp(p.log_prob)), p) for p in paths]
    else:
        if not paths:
            keyed = []
        else:
            items = np.array([p.terminal for p in paths])
            s = expit(score_model.user_scores(u, items))
            keyed = [(float(v), float(v), p) for v, p in zip(s, paths)]
    keyed.sort(key=lambda x: (-x[0], x[2].terminal))
    return RecommendationList(u, k, [Recommendation(p.terminal, score, p) for _, score, p in keyed[:k]])


def recommend_user(
    u: int,
    graph: IntegratedGraph,
    policy: Policy,
    score_model: DistMult | None,
    k: int = 10,
    beam: int = 64,
    horizon: int = 3,
    strategy: str = "path",
    exclusions=(),
) -> RecommendationList:
    paths = dedup(beam_search(u, horizon, beam, graph, policy), graph)
    return rank(paths, strategy, score_model, u, k, exclusions)


def uniform_policy(graph: IntegratedGraph, dim: int = 8, hidden: int = 8) -> Policy:
    """A policy whose action logits are all zero: a uniform random walk."""
    params = {
        "W": np.zeros((4 * hidden, 2 * dim + hidden)),
        "b": np.zeros(4 * hidden),
        "W1": np.zeros((hidden, hidden)),
        "b1": np.zeros(hidden),
        "W2": np.zeros((2 * dim, hidden)),
        "b2": np.zeros(2 * dim),
        "entity": np.zeros((graph.num_entities, dim)),
        "relation": np.zeros((graph.num_relations, dim)),
    }
    return Policy(params)


# -- presentation ---------------------------------------------------------


def path_steps_json(steps, graph: IntegratedGraph) -> list[dict]:
    return [{"relation": graph.relation_name(r), "entity": graph.entity_name(e)} for r, e in steps]


def to_record(rec: RecommendationList, graph: IntegratedGraph) -> dict:
    return {
        "user": graph.entity_name(rec.user),
        "items": [
            {
                "item": graph.entity_name(e.item),
                "score": e.score,
                "log_prob": e.path.log_prob,
                "path": path_steps_json(e.path.explanation(), graph),
                "raw_path": path_steps_json(e.path.steps(), graph),
            }
            for e in rec.entries
        ],
        "short": rec.short,
    }


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def render_path(user_label: str, steps: list[dict]) -> str:
    """``u --Interact--> Titanic --StarredBy--> ...`` from JSON path steps."""
    parts = [user_label]
    for s in steps:
        parts.append(f"--{s['relation']}--> {s['entity']}")
    return " ".join(parts)
