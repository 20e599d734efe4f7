"""Episodes on the recommendation MDP and REINFORCE training of the walk policy."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import TrainingError
from .graph import INTERACT, EntityKind, IntegratedGraph
from .kge import DistMult
from .optim import Adam, clip_by_global_norm
from .policy import EpisodeBatch, Policy, Trajectory

log = logging.getLogger(__name__)


def terminal_reward(u: int, e_T: int, graph: IntegratedGraph, score_model: DistMult | None, shaping: bool = True) -> float:
    """+1 for a training item of ``u``, sigmoid(psi) for any other item, -1 otherwise.

    With ``shaping`` off the middle case is 0.
    """
    if not graph.is_item(e_T):
        return -1.0
    if graph.is_interaction(u, e_T):
        return 1.0
    if not shaping:
        return 0.0
    if score_model is None:
        raise ValueError("reward shaping needs a score model")
    return float(score_model.shaping_score(u, e_T))


def terminal_rewards(users, terminals, graph: IntegratedGraph, score_model: DistMult | None, shaping: bool = True) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    terminals = np.asarray(terminals, dtype=np.int64)
    rewards = np.full(len(users), -1.0)
    is_item = graph.kinds[terminals] == EntityKind.ITEM
    hit = np.array([graph.is_interaction(u, e) for u, e in zip(users, terminals)], dtype=bool)
    rewards[is_item & hit] = 1.0
    rest = is_item & ~hit
    if shaping and rest.any():
        E, R = score_model.table.entity, score_model.table.relation
        psi = np.sum(E[users[rest]] * R[INTERACT] * E[terminals[rest]], axis=1)
        rewards[rest] = expit(psi)
    elif rest.any():
        rewards[rest] = 0.0
    return rewards


def rollout(
    u: int,
    horizon: int,
    graph: IntegratedGraph,
    policy: Policy,
    rng: np.random.Generator,
    dropout_rate: float = 0.0,
    score_model: DistMult | None = None,
    shaping: bool = True,
) -> Trajectory:
    batch = policy.rollout([u], horizon, graph, rng, action_dropout=dropout_rate)
    traj = batch.trajectories()[0]
    traj.reward = terminal_reward(u, traj.terminal, graph, score_model, shaping)
    return traj


class MovingBaseline:
    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.value = None

    def __call__(self, rewards: np.ndarray) -> float:
        current = 0.0 if self.value is None else self.value
        mean = float(np.mean(rewards))
        self.value = mean if self.value is None else self.decay * self.value + (1 - self.decay) * mean
        return current


def reinforce_update(
    batch: EpisodeBatch,
    policy: Policy,
    optimizer: Adam,
    grad_clip: float = 5.0,
    baseline: float = 0.0,
    freeze_embeddings: bool = False,
) -> dict:
    """One ascent step on the batch-mean of R_T * sum_t log pi(a_t | s_t)."""
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    weights = (rewards - baseline) / batch.size
    _, _, grads = policy.log_prob_and_grad(batch, weights)
    if freeze_embeddings:
        grads.pop("entity")
        grads.pop("relation")
    # optimizer minimizes, objective is maximized
    for g in grads.values():
        np.negative(g, out=g)
    norm = clip_by_global_norm(grads, grad_clip)
    optimizer.step(grads)
    return {"mean_reward": float(rewards.mean()), "grad_norm": norm}


@dataclass
class PolicyConfig:
    hidden: int = 64
    epochs: int = 20
    batch_size: int = 512
    max_len: int = 3
    action_dropout: float = 0.5
    embed_dropout: float = 0.1
    lr: float = 1e-3
    seed: int = 0
    reward_shaping: bool = True
    freeze_embeddings: bool = False
    grad_clip: float = 5.0
    baseline: bool = False
    baseline_decay: float = 0.9
    eval_every: int = 1
    val_k: int = 10
    val_beam: int = 64
    val_users: int = 500


@dataclass
class TrainResult:
    policy: Policy
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    epoch_rewards: list[float] = field(default_factory=list)
    val_hr: list[float] = field(default_factory=list)
    best_epoch: int = 0


def train_policy(
    graph: IntegratedGraph,
    score_model: DistMult,
    config: PolicyConfig,
    valid: dict[int, set[int]] | None = None,
    policy: Policy | None = None,
) -> TrainResult:
    """REINFORCE over shuffled training interactions, one episode per occurrence of a user.

    When ``valid`` (user -> held-out validation items) is given, the policy with
    the best validation HR@k is returned; otherwise the last one.
    """
    from .inference import recommend_user
    from .metrics import mean_metrics

    rng = np.random.default_rng(config.seed)
    if policy is None:
        policy = Policy.initialize(score_model.table, config.hidden, rng)
    opt = Adam(policy.params, lr=config.lr)
    baseline = MovingBaseline(config.baseline_decay) if config.baseline else None
    starts = graph.interactions[:, 0]
    result = TrainResult(policy)
    if config.epochs == 0 or len(starts) == 0:
        return result

    val_users = None
    if valid:
        val_users = np.array(sorted(u for u, items in valid.items() if items), dtype=np.int64)
        if len(val_users) > config.val_users:
            val_users = np.sort(np.random.default_rng(config.seed + 1).choice(val_users, config.val_users, replace=False))
    best, best_params = -1.0, None

    t0 = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(starts)
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            users = order[lo : lo + config.batch_size]
            batch = policy.rollout(
                users, config.max_len, graph, rng, config.action_dropout, config.embed_dropout, train=True
            )
            batch.rewards = terminal_rewards(users, batch.terminals, graph, score_model, config.reward_shaping)
            b = baseline(batch.rewards) if baseline is not None else 0.0
            try:
                stats = reinforce_update(batch, policy, opt, config.grad_clip, b, config.freeze_embeddings)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch + 1}, step {step + 1}: {exc}") from None
            step += 1
            total += stats["mean_reward"] * len(users)
            result.curve.append((step, (time.perf_counter() - t0) / 60.0, stats["mean_reward"]))
        result.epoch_rewards.append(total / len(order))
        msg = f"epoch {epoch + 1} mean reward {result.epoch_rewards[-1]:.4f}"

        if val_users is not None and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs):
            lists = {
                int(u): [e.item for e in recommend_user(
                    int(u), graph, policy, score_model, config.val_k, config.val_beam, config.max_len,
                    exclusions=set(graph.user_items(u).tolist()),
                ).entries]
                for u in val_users
            }
            hr, _ = mean_metrics(lists, valid, config.val_k)
            result.val_hr.append(hr)
            msg += f" val HR@{config.val_k} {hr:.4f}"
            if hr >= best:
                best, best_params = hr, {k: v.copy() for k, v in policy.params.items()}
                result.best_epoch = epoch + 1
        log.info(msg)

    if best_params is not None:
        result.policy = Policy(best_params)
    else:
        result.best_epoch = config.epochs
    return result
