"""DistMult embeddings pre-trained on G' and the reward-shaping score."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, TrainingError
from .graph import INTERACT, INTERACTED_BY, IntegratedGraph
from .optim import Adam

log = logging.getLogger(__name__)

KGE_MAGIC = b"KGWE"
KGE_VERSION = 1
SCORE_VARIANTS = ("distmult", "conve")


class EmbeddingTable:
    def __init__(self, entity: np.ndarray, relation: np.ndarray):
        entity = np.asarray(entity, dtype=np.float64)
        relation = np.asarray(relation, dtype=np.float64)
        if entity.ndim != 2 or relation.ndim != 2 or entity.shape[1] != relation.shape[1]:
            raise ValueError(f"incompatible embedding shapes {entity.shape} / {relation.shape}")
        self.entity = entity
        self.relation = relation

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    @classmethod
    def initialize(cls, n_entities: int, n_relations: int, dim: int, rng: np.random.Generator) -> "EmbeddingTable":
        bound = 0.5 / dim
        return cls(
            rng.uniform(-bound, bound, size=(n_entities, dim)),
            rng.uniform(-bound, bound, size=(n_relations, dim)),
        )

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.entity.copy(), self.relation.copy())

    def save(self, path: str | Path) -> None:
        """Header ``magic, version, d, |V'|, |R'|`` then both matrices as little-endian f32."""
        n_ent, d = self.entity.shape
        header = KGE_MAGIC + struct.pack("<4I", KGE_VERSION, d, n_ent, self.relation.shape[0])
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.entity.astype("<f4").tobytes(order="C"))
            fh.write(self.relation.astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != KGE_MAGIC or len(raw) < 20:
            raise DataError("not a KGE checkpoint", path=str(path))
        version, d, n_ent, n_rel = struct.unpack("<4I", raw[4:20])
        if version != KGE_VERSION:
            raise DataError(f"unsupported KGE checkpoint version {version}", path=str(path))
        body = np.frombuffer(raw, dtype="<f4", offset=20)
        if body.size != (n_ent + n_rel) * d:
            raise DataError("truncated KGE checkpoint", path=str(path))
        ent = body[: n_ent * d].reshape(n_ent, d)
        rel = body[n_ent * d :].reshape(n_rel, d)
        return cls(ent.astype(np.float64), rel.astype(np.float64))


def distmult(h: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Trilinear product summed over the last axis."""
    return np.sum(h * r * t, axis=-1)


class DistMult:
    """Score model psi(h, r, t) = <e_h, w_r, e_t>."""

    variant = "distmult"

    def __init__(self, table: EmbeddingTable):
        self.table = table

    def score(self, h, r, t):
        E, R = self.table.entity, self.table.relation
        return distmult(E[h], R[r], E[t])

    def user_scores(self, u: int, items: np.ndarray) -> np.ndarray:
        """psi(u, Interact, i) for every ``i`` in ``items``."""
        E, R = self.table.entity, self.table.relation
        return E[items] @ (E[u] * R[INTERACT])

    def shaping_score(self, u, i):
        return expit(self.score(u, INTERACT, i))


def check_variant(variant: str) -> None:
    if variant == "distmult":
        return
    if variant in SCORE_VARIANTS:
        raise ConfigError(f"score model {variant!r} is not implemented")
    raise ConfigError(f"unknown score model {variant!r}; choose from {SCORE_VARIANTS}")


def make_score_model(variant: str, table: EmbeddingTable) -> DistMult:
    check_variant(variant)
    return DistMult(table)


def bce_loss_and_grads(E, R, pos, neg, drop=None):
    """Negative-sampling BCE for DistMult.

    ``pos`` is (n, 3) and ``neg`` is (n, k, 3) index triples. The loss is the
    mean over positives of ``-log s(x+) - sum_k log(1 - s(x-_k))``. ``drop`` is
    an optional dict of inverted-dropout scale arrays for the gathered vectors.
    Returns (loss, dE, dR) with gradients the full shape of ``E`` and ``R``.
    """
    n = len(pos)
    trip = np.concatenate([pos[:, None, :], neg], axis=1).reshape(-1, 3)
    h, r, t = E[trip[:, 0]], R[trip[:, 1]], E[trip[:, 2]]
    if drop is not None:
        h = h * drop["h"]
        r = r * drop["r"]
        t = t * drop["t"]
    s = distmult(h, r, t).reshape(n, -1)
    label = np.zeros_like(s)
    label[:, 0] = 1.0
    # softplus(-s) for positives, softplus(s) for negatives
    sign = 1.0 - 2.0 * label
    loss = float(np.sum(np.logaddexp(0.0, sign * s)) / n)
    ds = ((expit(s) - label) / n).reshape(-1, 1)
    gh, gr, gt = ds * r * t, ds * h * t, ds * h * r
    if drop is not None:
        gh = gh * drop["h"]
        gr = gr * drop["r"]
        gt = gt * drop["t"]
    dE = np.zeros_like(E)
    dR = np.zeros_like(R)
    np.add.at(dE, trip[:, 0], gh)
    np.add.at(dE, trip[:, 2], gt)
    np.add.at(dR, trip[:, 1], gr)
    return loss, dE, dR


@dataclass
class KGEConfig:
    dim: int = 32
    epochs: int = 100
    negatives: int = 8
    lr: float = 1e-3
    dropout: float = 0.1
    batch_size: int = 512
    seed: int = 0
    variant: str = "distmult"
    include_interactions: bool = True


class NegativeSampler:
    """Corrupts the head or tail of a triple with a uniform entity of the same kind."""

    def __init__(self, kinds: np.ndarray, rng: np.random.Generator):
        self.kinds = np.asarray(kinds)
        self.rng = rng
        self.pools = {int(k): np.flatnonzero(self.kinds == k) for k in np.unique(self.kinds)}

    def sample(self, pos: np.ndarray, k: int) -> np.ndarray:
        n = len(pos)
        neg = np.repeat(pos[:, None, :], k, axis=1)
        corrupt_tail = self.rng.random((n, k)) < 0.5
        slot = np.where(corrupt_tail, 2, 0)
        orig = np.take_along_axis(neg, slot[..., None], axis=2)[..., 0]
        slot_kind = self.kinds[orig]
        replacement = np.empty_like(orig)
        for kind, pool in self.pools.items():
            mask = slot_kind == kind
            cnt = int(mask.sum())
            if cnt:
                replacement[mask] = pool[self.rng.integers(len(pool), size=cnt)]
        np.put_along_axis(neg, slot[..., None], replacement[..., None], axis=2)
        return neg


def training_triples(graph: IntegratedGraph, include_interactions: bool = True) -> np.ndarray:
    h, r, t = graph.edge_arrays(include_self_loops=False)
    if not include_interactions:
        keep = (r != INTERACT) & (r != INTERACTED_BY)
        h, r, t = h[keep], r[keep], t[keep]
    return np.stack([h, r, t], axis=1)


def dropout_scales(rng, shape, rate):
    if rate <= 0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def train_kge(graph: IntegratedGraph, config: KGEConfig, table: EmbeddingTable | None = None):
    """Fit DistMult on the edges of ``graph``.

    Returns (score_model, per-epoch mean losses).
    """
    check_variant(config.variant)
    rng = np.random.default_rng(config.seed)
    if table is None:
        table = EmbeddingTable.initialize(graph.num_entities, graph.num_relations, config.dim, rng)
    triples = training_triples(graph, config.include_interactions)
    sampler = NegativeSampler(graph.kinds, rng)
    params = {"entity": table.entity, "relation": table.relation}
    opt = Adam(params, lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(triples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            pos = triples[order[start : start + config.batch_size]]
            neg = sampler.sample(pos, config.negatives)
            m = len(pos) * (config.negatives + 1)
            drop = None
            if config.dropout > 0:
                drop = {key: dropout_scales(rng, (m, config.dim), config.dropout) for key in "hrt"}
            loss, dE, dR = bce_loss_and_grads(table.entity, table.relation, pos, neg, drop)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"KGE loss became {loss} at epoch {epoch}, batch starting {start}; "
                    f"max |entity| = {np.abs(table.entity).max():.3g}"
                )
            opt.step({"entity": dE, "relation": dR})
            total += loss * len(pos)
            count += len(pos)
        history.append(total / max(count, 1))
        if (epoch + 1) % 10 == 0 or epoch == config.epochs - 1:
            log.info("kge epoch %d loss %.4f", epoch + 1, history[-1])
    return make_score_model(config.variant, table), history
