"""Walk policy: LSTM history encoder, 2-layer MLP action scorer, action dropout.

All computation is plain numpy in float64. ``Policy.rollout`` samples a batch
of episodes; ``Policy.log_prob_and_grad`` replays recorded episodes and returns
the gradient of a reward-weighted sum of their log-probabilities, which is
what the REINFORCE update consumes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DataError
from .graph import SELF_LOOP, START, IntegratedGraph
from .kge import EmbeddingTable

POLICY_MAGIC = b"KGWP"
POLICY_VERSION = 1
# fixed on-disk tensor order
PARAM_ORDER = ("W", "b", "W1", "b1", "W2", "b2", "entity", "relation")
EMBEDDING_KEYS = ("entity", "relation")


@dataclass
class StateEncoding:
    hidden: np.ndarray
    cell: np.ndarray


@dataclass
class Trajectory:
    steps: list[tuple[int, int]]
    log_probs: list[float]
    reward: float = 0.0

    @property
    def user(self) -> int:
        return self.steps[0][1]

    @property
    def terminal(self) -> int:
        return self.steps[-1][1]


def lstm_cell(W, b, x, h, c):
    """One LSTM step; gate rows of ``W`` are ordered input, forget, output, candidate.

    Works on single vectors or on (batch, dim) arrays.
    """
    n = h.shape[-1]
    z = np.concatenate([x, h], axis=-1) @ W.T + b
    i = expit(z[..., :n])
    f = expit(z[..., n : 2 * n])
    o = expit(z[..., 2 * n : 3 * n])
    g = np.tanh(z[..., 3 * n :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (i, f, o, g, tc)


def log_softmax(logits, mask=None):
    """Row-wise log-softmax; entries with ``mask == False`` get -inf."""
    logits = np.asarray(logits, dtype=np.float64)
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    top = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits, mask=None):
    return np.exp(log_softmax(logits, mask))


def sample_action(dist, rng: np.random.Generator) -> int:
    dist = np.asarray(dist, dtype=np.float64)
    total = dist.sum()
    if dist.ndim != 1 or abs(total - 1.0) > 1e-6:
        raise ValueError(f"not a probability vector (sum {total})")
    return int(_sample_rows(dist[None, :], rng)[0])


def _sample_rows(p, rng):
    # inverse CDF; a zero-probability entry can never be the first to exceed u
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(p)) * cdf[:, -1]
    return np.argmax(cdf > u[:, None], axis=1)


def action_dropout_mask(rel: np.ndarray, valid: np.ndarray, rate: float, rng) -> np.ndarray:
    """Keep each candidate with prob ``1 - rate``; self-loops are always kept."""
    if rate <= 0:
        return valid.copy()
    keep = rng.random(rel.shape) >= rate
    return valid & (keep | (rel == SELF_LOOP))


@dataclass
class EpisodeBatch:
    """Recorded episodes, enough to replay them exactly.

    ``rel``/``ent`` are (B, T+1) paths starting with (Start, user). For each of
    the T decisions the padded candidate ids, the post-dropout availability mask
    and the chosen column are kept.
    """

    rel: np.ndarray
    ent: np.ndarray
    cand_rel: list[np.ndarray]
    cand_ent: list[np.ndarray]
    cand_mask: list[np.ndarray]
    chosen: np.ndarray
    log_probs: np.ndarray
    input_scale: np.ndarray | None = None
    rewards: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.rel.shape[0]

    @property
    def horizon(self) -> int:
        return self.rel.shape[1] - 1

    @property
    def users(self) -> np.ndarray:
        return self.ent[:, 0]

    @property
    def terminals(self) -> np.ndarray:
        return self.ent[:, -1]

    def trajectories(self) -> list[Trajectory]:
        out = []
        for b in range(self.size):
            steps = list(zip(self.rel[b].tolist(), self.ent[b].tolist()))
            reward = float(self.rewards[b]) if self.rewards is not None else 0.0
            out.append(Trajectory(steps, self.log_probs[b].tolist(), reward))
        return out


def pad_actions(graph: IntegratedGraph, entities, rng=None):
    """Stack the action sets of ``entities`` into padded (B, A) arrays plus a validity mask."""
    sets = [graph.actions(int(e), rng) for e in entities]
    width = max(len(r) for r, _ in sets)
    B = len(sets)
    rel = np.full((B, width), SELF_LOOP, dtype=np.int64)
    ent = np.zeros((B, width), dtype=np.int64)
    valid = np.zeros((B, width), dtype=bool)
    for b, (r, e) in enumerate(sets):
        rel[b, : len(r)] = r
        ent[b, : len(e)] = e
        valid[b, : len(r)] = True
    ent[~valid] = np.repeat(np.asarray(entities)[:, None], width, axis=1)[~valid]
    return rel, ent, valid


class Policy:
    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params
        self.dim = params["entity"].shape[1]
        self.hidden = params["W1"].shape[0]

    @classmethod
    def initialize(cls, table: EmbeddingTable, hidden: int, rng: np.random.Generator) -> "Policy":
        d = table.dim
        h = hidden

        def xavier(fan_out, fan_in):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_out, fan_in))

        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0  # forget gate
        params = {
            "W": xavier(4 * h, 2 * d + h),
            "b": b,
            "W1": xavier(h, h),
            "b1": np.zeros(h),
            "W2": xavier(2 * d, h),
            "b2": np.zeros(2 * d),
            "entity": table.entity.copy(),
            "relation": table.relation.copy(),
        }
        return cls(params)

    def copy(self) -> "Policy":
        return Policy({k: v.copy() for k, v in self.params.items()})

    # -- single-instance API ----------------------------------------------

    def action_embedding(self, rel, ent) -> np.ndarray:
        P = self.params
        return np.concatenate([P["relation"][rel], P["entity"][ent]], axis=-1)

    def zero_state(self, batch: int | None = None) -> StateEncoding:
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return StateEncoding(np.zeros(shape), np.zeros(shape))

    def encode_initial(self, user, r0: int = START) -> StateEncoding:
        return self.encode_step(self.zero_state(), self.action_embedding(r0, user))

    def encode_step(self, prev: StateEncoding, action_vec: np.ndarray) -> StateEncoding:
        h, c, _ = lstm_cell(self.params["W"], self.params["b"], action_vec, prev.hidden, prev.cell)
        return StateEncoding(h, c)

    def query(self, hidden: np.ndarray) -> np.ndarray:
        """y = W2 ReLU(W1 s + b1) + b2."""
        P = self.params
        m = np.maximum(hidden @ P["W1"].T + P["b1"], 0.0)
        return m @ P["W2"].T + P["b2"]

    def action_distribution(
        self,
        state: StateEncoding,
        cand_rel,
        cand_ent,
        dropout_rate: float = 0.0,
        mode: str = "inference",
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """pi(. | s) over the candidates; masked-out candidates get probability 0."""
        cand_rel = np.asarray(cand_rel)
        cand_ent = np.asarray(cand_ent)
        if cand_rel.size == 0:
            raise ValueError("empty candidate set")
        logits = self.action_embedding(cand_rel, cand_ent) @ self.query(state.hidden)
        mask = None
        if mode == "train" and dropout_rate > 0:
            if rng is None:
                raise ValueError("training-mode action dropout needs an rng")
            mask = action_dropout_mask(cand_rel, np.ones(cand_rel.shape, bool), dropout_rate, rng)
        elif mode not in ("train", "inference"):
            raise ValueError(f"unknown mode {mode!r}")
        return softmax(logits, mask)

    # -- batched episodes -------------------------------------------------

    def rollout(
        self,
        users,
        horizon: int,
        graph: IntegratedGraph,
        rng: np.random.Generator,
        action_dropout: float = 0.0,
        embed_dropout: float = 0.0,
        train: bool = True,
    ) -> EpisodeBatch:
        """Sample one episode of ``horizon`` steps from each user in ``users``."""
        P = self.params
        users = np.asarray(users, dtype=np.int64)
        B, d = len(users), self.dim
        rel = np.zeros((B, horizon + 1), dtype=np.int64)
        ent = np.zeros((B, horizon + 1), dtype=np.int64)
        rel[:, 0] = START
        ent[:, 0] = users
        chosen = np.zeros((B, horizon), dtype=np.int64)
        log_probs = np.zeros((B, horizon))
        scale = None
        if train and embed_dropout > 0:
            keep = rng.random((horizon, B, 2 * d)) >= embed_dropout
            scale = keep / (1.0 - embed_dropout)
        cands_r, cands_e, masks = [], [], []
        h = np.zeros((B, self.hidden))
        c = np.zeros((B, self.hidden))
        for t in range(horizon):
            x = self.action_embedding(rel[:, t], ent[:, t])
            if scale is not None:
                x = x * scale[t]
            h, c, _ = lstm_cell(P["W"], P["b"], x, h, c)
            y = self.query(h)
            cr, ce, valid = pad_actions(graph, ent[:, t], rng if train else None)
            mask = action_dropout_mask(cr, valid, action_dropout, rng) if train else valid
            logits = np.einsum("bad,bd->ba", self.action_embedding(cr, ce), y)
            lp = log_softmax(logits, mask)
            pick = _sample_rows(np.exp(lp), rng)
            rows = np.arange(B)
            chosen[:, t] = pick
            log_probs[:, t] = lp[rows, pick]
            rel[:, t + 1] = cr[rows, pick]
            ent[:, t + 1] = ce[rows, pick]
            cands_r.append(cr)
            cands_e.append(ce)
            masks.append(mask)
        return EpisodeBatch(rel, ent, cands_r, cands_e, masks, chosen, log_probs, scale)

    def log_prob_and_grad(self, batch: EpisodeBatch, weights) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
        """Replay ``batch`` and differentiate J = sum_b w_b sum_t log pi(a_bt | s_bt).

        Returns (J, per-step log-probs (B, T), dJ/dparams).
        """
        P = self.params
        W, W1, W2 = P["W"], P["W1"], P["W2"]
        w = np.asarray(weights, dtype=np.float64)
        B, T, d, n = batch.size, batch.horizon, self.dim, self.hidden
        rows = np.arange(B)

        h = np.zeros((B, n))
        c = np.zeros((B, n))
        caches = []
        logp = np.zeros((B, T))
        for t in range(T):
            x = self.action_embedding(batch.rel[:, t], batch.ent[:, t])
            if batch.input_scale is not None:
                x = x * batch.input_scale[t]
            h_prev, c_prev = h, c
            h, c, gates = lstm_cell(W, P["b"], x, h_prev, c_prev)
            q = h @ W1.T + P["b1"]
            m = np.maximum(q, 0.0)
            y = m @ W2.T + P["b2"]
            A = self.action_embedding(batch.cand_rel[t], batch.cand_ent[t])
            lp = log_softmax(np.einsum("bad,bd->ba", A, y), batch.cand_mask[t])
            logp[:, t] = lp[rows, batch.chosen[:, t]]
            caches.append((x, h_prev, c_prev, gates, h, q, m, y, np.exp(lp)))

        objective = float(np.sum(w[:, None] * logp))

        grads = {k: np.zeros_like(v) for k, v in P.items()}
        gE, gR = grads["entity"], grads["relation"]
        dh_next = np.zeros((B, n))
        dc_next = np.zeros((B, n))
        for t in reversed(range(T)):
            x, h_prev, c_prev, (i, f, o, g, tc), h, q, m, y, p = caches[t]
            mask = batch.cand_mask[t]
            onehot = np.zeros_like(p)
            onehot[rows, batch.chosen[:, t]] = 1.0
            dlogits = w[:, None] * np.where(mask, onehot - p, 0.0)

            cr, ce = batch.cand_rel[t], batch.cand_ent[t]
            A = self.action_embedding(cr, ce)
            dy = np.einsum("ba,bad->bd", dlogits, A)
            dA = dlogits[:, :, None] * y[:, None, :]
            np.add.at(gR, cr.ravel(), dA[..., :d].reshape(-1, d))
            np.add.at(gE, ce.ravel(), dA[..., d:].reshape(-1, d))

            grads["W2"] += dy.T @ m
            grads["b2"] += dy.sum(axis=0)
            dq = (dy @ W2) * (q > 0)
            grads["W1"] += dq.T @ h
            grads["b1"] += dq.sum(axis=0)

            dh = dq @ W1 + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dh * tc * o * (1.0 - o),
                    dc * i * (1.0 - g * g),
                ],
                axis=1,
            )
            grads["W"] += dz.T @ np.concatenate([x, h_prev], axis=1)
            grads["b"] += dz.sum(axis=0)
            dxh = dz @ W
            dx = dxh[:, : 2 * d]
            dh_next = dxh[:, 2 * d :]
            dc_next = dc * f
            if batch.input_scale is not None:
                dx = dx * batch.input_scale[t]
            np.add.at(gR, batch.rel[:, t], dx[:, :d])
            np.add.at(gE, batch.ent[:, t], dx[:, d:])
        return objective, logp, grads

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Header ``magic, version, d, h, |V'|, |R'|`` then PARAM_ORDER tensors as little-endian f32."""
        P = self.params
        header = POLICY_MAGIC + struct.pack(
            "<5I", POLICY_VERSION, self.dim, self.hidden, P["entity"].shape[0], P["relation"].shape[0]
        )
        with open(path, "wb") as fh:
            fh.write(header)
            for key in PARAM_ORDER:
                fh.write(np.ascontiguousarray(P[key]).astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Policy":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != POLICY_MAGIC or len(raw) < 24:
            raise DataError("not a policy checkpoint", path=str(path))
        version, d, h, n_ent, n_rel = struct.unpack("<5I", raw[4:24])
        if version != POLICY_VERSION:
            raise DataError(f"unsupported policy checkpoint version {version}", path=str(path))
        shapes = {
            "W": (4 * h, 2 * d + h),
            "b": (4 * h,),
            "W1": (h, h),
            "b1": (h,),
            "W2": (2 * d, h),
            "b2": (2 * d,),
            "entity": (n_ent, d),
            "relation": (n_rel, d),
        }
        body = np.frombuffer(raw, dtype="<f4", offset=24)
        params, pos = {}, 0
        for key in PARAM_ORDER:
            size = int(np.prod(shapes[key]))
            if pos + size > body.size:
                raise DataError("truncated policy checkpoint", path=str(path))
            params[key] = body[pos : pos + size].reshape(shapes[key]).astype(np.float64)
            pos += size
        if pos != body.size:
            raise DataError("trailing bytes in policy checkpoint", path=str(path))
        return cls(params)
