"""
Online self-improvement for the edge agent.

The reward model scores (context, action) pairs; its score is both the routing
statistic and the RL reward. The edge policy is improved by clipped PPO with a
KL penalty toward the pre-update policy, and every M updates it is pulled back
toward the frozen SFT policy by a cross-entropy anchoring step.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import sparse, special

from agents.services.toyworld import (
    DEFAULT_CATALOG,
    Catalog,
    Context,
    EdgePolicy,
    HeadDistribution,
    StructuredAction,
    Task,
    last_tool,
    validate_schema,
)
from lab.exceptions import UsageError
from lab.services.net_model import NetworkState

logger = logging.getLogger(__name__)


class RewardModel:
    """Linear scorer over sparse (context, action) pair features"""

    def __init__(self, catalog: Catalog = DEFAULT_CATALOG, psi: Optional[np.ndarray] = None):
        self.catalog = catalog
        v = catalog.size
        self._pair_offset = 0
        self._final_offset = v * (v + 1)
        self._arg_offset = self._final_offset + (v + 1)
        self._arg_index = {}
        offset = self._arg_offset
        for tool_idx, slot_idx in catalog.slot_keys:
            domain = catalog.tools[tool_idx].arg_slots[slot_idx][1]
            self._arg_index[(tool_idx, slot_idx)] = offset
            offset += len(domain)
        self._schema_index = offset
        self.dim = offset + 1
        self.psi = np.zeros(self.dim) if psi is None else np.asarray(psi, dtype=float).copy()

    def copy(self) -> 'RewardModel':
        return RewardModel(self.catalog, self.psi)

    def features(self, task: Task, ctx: Context, action: StructuredAction) -> np.ndarray:
        """Indices of active unit features"""
        v = self.catalog.size
        column = self.catalog.index.get(action.tool, v)
        active = []
        last = self.catalog.index.get(last_tool(task, ctx))
        if last is not None:
            active.append(self._pair_offset + last * (v + 1) + column)
        if ctx.cursor == len(task.target) - 1:
            active.append(self._final_offset + column)
        valid = validate_schema(action, task)
        if valid and column < v:
            spec = self.catalog.tools[column]
            for slot_idx, (slot, domain) in enumerate(spec.arg_slots):
                active.append(self._arg_index[(column, slot_idx)] + domain.index(action.args[slot]))
        if not valid:
            active.append(self._schema_index)
        return np.array(active, dtype=int)

    def score(self, task: Task, ctx: Context, action: StructuredAction) -> float:
        return float(self.psi[self.features(task, ctx, action)].sum())


def rm_score(rm: RewardModel, task: Task, ctx: Context, action: StructuredAction) -> float:
    return rm.score(task, ctx, action)


@dataclass(frozen=True)
class PreferencePair:
    task: Task
    ctx: Context
    preferred: StructuredAction
    rejected: StructuredAction


@dataclass(frozen=True)
class RMTrainConfig:
    lr: float = 0.5
    epochs: int = 200
    val_fraction: float = 0.2
    patience: int = 3
    # Score margin subtracted from schema-invalid candidates before the loss
    schema_margin: float = 1.0
    seed: int = 0


@dataclass
class RMTrainResult:
    rm: RewardModel
    train_losses: list[float]
    val_losses: list[float]
    stopped_early: bool


def pairwise_loss(margin: np.ndarray) -> np.ndarray:
    """log(1 + exp(-(s+ - s-)))"""
    return np.logaddexp(0.0, -np.asarray(margin, dtype=float))


def _pair_design(rm: RewardModel, pairs: Sequence[PreferencePair], margin: float):
    rows, cols, vals = [], [], []
    offsets = np.zeros(len(pairs))
    for i, pair in enumerate(pairs):
        for action, sign in ((pair.preferred, 1.0), (pair.rejected, -1.0)):
            for j in rm.features(pair.task, pair.ctx, action):
                rows.append(i)
                cols.append(j)
                vals.append(sign)
            if not validate_schema(action, pair.task):
                offsets[i] -= sign * margin
    design = sparse.csr_matrix((vals, (rows, cols)), shape=(len(pairs), rm.dim))
    return design, offsets


def rm_train(rm: RewardModel, pairs: Sequence[PreferencePair], hyper: Optional[RMTrainConfig] = None) -> RMTrainResult:
    """Full-batch gradient descent on the pairwise ranking loss with early stopping"""
    hyper = hyper or RMTrainConfig()
    if not pairs:
        raise UsageError("rm_train needs at least one preference pair")
    design, offsets = _pair_design(rm, pairs, hyper.schema_margin)

    order = np.random.default_rng(hyper.seed).permutation(len(pairs))
    n_val = int(math.ceil(hyper.val_fraction * len(pairs))) if len(pairs) >= 10 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_train, o_train = design[train_idx], offsets[train_idx]
    x_val, o_val = design[val_idx], offsets[val_idx]

    psi = rm.psi.copy()
    best_psi, best_val = psi.copy(), np.inf
    train_losses, val_losses = [], []
    stale = 0
    stopped_early = False
    for _ in range(hyper.epochs):
        margin = x_train @ psi + o_train
        train_losses.append(float(pairwise_loss(margin).mean()))
        weights = special.expit(-margin)
        psi = psi + hyper.lr * (x_train.T @ weights) / len(train_idx)
        if n_val:
            val_loss = float(pairwise_loss(x_val @ psi + o_val).mean())
            val_losses.append(val_loss)
            if val_loss < best_val - 1e-12:
                best_val, best_psi, stale = val_loss, psi.copy(), 0
            else:
                stale += 1
                if stale >= hyper.patience:
                    stopped_early = True
                    logger.info("Reward model early stop after %d epochs (val loss %.6f)", len(train_losses), best_val)
                    break
    final = best_psi if n_val else psi
    return RMTrainResult(
        rm=RewardModel(rm.catalog, final),
        train_losses=train_losses,
        val_losses=val_losses,
        stopped_early=stopped_early,
    )


def pairwise_accuracy(rm: RewardModel, pairs: Sequence[PreferencePair]) -> float:
    wins = [rm.score(p.task, p.ctx, p.preferred) > rm.score(p.task, p.ctx, p.rejected) for p in pairs]
    return float(np.mean(wins))


def preference_pairs(tuples: Iterable['CachedTuple']) -> list[PreferencePair]:
    """Cloud action preferred over the edge action; identical actions carry no signal"""
    pairs = []
    for item in tuples:
        if item.edge_action.tool == item.cloud_action.tool and item.edge_action.args == item.cloud_action.args:
            continue
        pairs.append(PreferencePair(item.task, item.ctx, item.cloud_action, item.edge_action))
    return pairs


def discounted_returns(rewards: Sequence[float], gamma: float) -> list[float]:
    """G_k = r_k + gamma * G_{k+1}"""
    if not 0.0 <= gamma <= 1.0:
        raise UsageError("gamma must lie in [0, 1]")
    returns = [0.0] * len(rewards)
    running = 0.0
    for k in reversed(range(len(rewards))):
        running = rewards[k] + gamma * running
        returns[k] = running
    return returns


@dataclass(frozen=True)
class RLSample:
    task: Task
    ctx: Context
    action: StructuredAction
    logp: Optional[float]
    reward: float
    episode: str
    step: int


@dataclass(frozen=True)
class CachedTuple:
    task: Task
    ctx: Context
    edge_action: StructuredAction
    cloud_action: StructuredAction
    score: float
    state: NetworkState
    near_threshold: bool = False

    def to_record(self) -> dict:
        return {
            'task_id': self.task.id,
            'context': self.ctx.to_record(),
            'edge_action': self.edge_action.to_record(),
            'cloud_action': self.cloud_action.to_record(),
            'score': self.score,
            'rtt_ms': self.state.rtt_ms,
            'bw_mbps': self.state.bw_mbps,
            'near_threshold': self.near_threshold,
        }


class Caches:
    """Bounded FIFO caches for reward-model refresh and RL"""

    def __init__(self, rm_capacity: int = 10_000, rl_capacity: int = 10_000):
        if rm_capacity < 1 or rl_capacity < 1:
            raise UsageError("Cache capacities must be positive")
        self.rm = deque(maxlen=rm_capacity)
        self.rl = deque(maxlen=rl_capacity)

    def add_cloud_tuple(self, item: CachedTuple):
        self.rm.append(item)

    def add_rl_sample(self, sample: RLSample):
        self.rl.append(sample)

    def rm_snapshot(self) -> list[CachedTuple]:
        return list(self.rm)

    def rl_snapshot(self) -> list[RLSample]:
        return list(self.rl)


def near_threshold_sample(
    steps: Sequence[tuple[float, float]],
    delta: float,
    fraction: float,
    rng: np.random.Generator,
) -> list[int]:
    """Uniformly pick floor(fraction * |eligible|) steps with tau <= s <= tau + delta"""
    if delta < 0 or not 0.0 <= fraction <= 1.0:
        raise UsageError("delta must be >= 0 and fraction must lie in [0, 1]")
    eligible = [i for i, (s, tau) in enumerate(steps) if tau <= s <= tau + delta]
    n = int(math.floor(fraction * len(eligible) + 1e-9))
    if n == 0:
        return []
    return sorted(int(i) for i in rng.choice(eligible, size=n, replace=False))


def categorical_kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(special.rel_entr(p, q)))


def policy_kl(dist_p: HeadDistribution, dist_q: HeadDistribution) -> float:
    """Exact KL between factorized action distributions at one context"""
    total = categorical_kl(dist_p.tool_probs, dist_q.tool_probs)
    for pos, heads in dist_p.slot_probs.items():
        inner = sum(categorical_kl(p, q) for (_, p), (_, q) in zip(heads, dist_q.slot_probs[pos]))
        total += dist_p.tool_probs[pos] * inner
    return float(total)


def _softmax_weighted_grad(probs: np.ndarray, values: np.ndarray) -> np.ndarray:
    """d/dz of sum_i p_i(z) g_i when g_i = log p_i + const_i"""
    return probs * (values - np.dot(probs, values))


def policy_kl_grad(policy: EdgePolicy, dist_p: HeadDistribution, dist_q: HeadDistribution) -> np.ndarray:
    """Gradient of KL(pi_theta || q) w.r.t. the parameters that produced dist_p"""
    grad = np.zeros_like(policy.theta)
    inner = np.zeros(len(dist_p.tool_probs))
    for pos, heads in dist_p.slot_probs.items():
        for (key, p), (_, q) in zip(heads, dist_q.slot_probs[pos]):
            inner[pos] += categorical_kl(p, q)
            dz = dist_p.tool_probs[pos] * _softmax_weighted_grad(p, np.log(p) - np.log(q))
            policy.slot_weights(key, grad)[:] += np.outer(dist_p.x, dz)
    g = np.log(dist_p.tool_probs) - np.log(dist_q.tool_probs) + inner
    policy.tool_weights(grad)[:, dist_p.columns] += np.outer(dist_p.x, _softmax_weighted_grad(dist_p.tool_probs, g))
    return grad


def cross_entropy_grad(policy: EdgePolicy, dist_ref: HeadDistribution, dist_pi: HeadDistribution) -> np.ndarray:
    """Gradient of H(pi_ref, pi_theta) w.r.t. the parameters that produced dist_pi"""
    grad = np.zeros_like(policy.theta)
    policy.tool_weights(grad)[:, dist_pi.columns] += np.outer(dist_pi.x, dist_pi.tool_probs - dist_ref.tool_probs)
    for pos, heads in dist_pi.slot_probs.items():
        weight = dist_ref.tool_probs[pos]
        for (key, q), (_, r) in zip(heads, dist_ref.slot_probs[pos]):
            policy.slot_weights(key, grad)[:] += np.outer(dist_pi.x, weight * (q - r))
    return grad


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    kl_beta: float = 0.05
    gamma: float = 0.99
    lr: float = 0.01
    # Gradient steps per PPO update
    epochs: int = 4
    batch_size: int = 256
    updates_per_window: int = 4
    anchor: bool = True
    anchor_period: int = 10
    anchor_lr: float = 0.5
    anchor_steps: int = 1
    anchor_tasks: int = 64
    # Forward-KL weight for the monitored composite objective
    anchor_weight: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise UsageError("clip epsilon must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise UsageError("gamma must lie in (0, 1]")
        if self.anchor_period < 1:
            raise UsageError("anchor period must be at least 1")


def compute_advantages(batch: Sequence[RLSample], gamma: float) -> np.ndarray:
    """Return-to-go per episode, minus the batch mean, standardized"""
    returns = np.zeros(len(batch))
    episodes = {}
    for i, sample in enumerate(batch):
        episodes.setdefault(sample.episode, []).append(i)
    for indices in episodes.values():
        indices = sorted(indices, key=lambda i: batch[i].step)
        for i, g in zip(indices, discounted_returns([batch[i].reward for i in indices], gamma)):
            returns[i] = g
    advantages = returns - returns.mean()
    std = advantages.std()
    return advantages / std if std > 1e-12 else advantages


@dataclass
class PPOStats:
    objective: float
    surrogate: float
    kl: float
    mean_ratio: float
    clip_frac: float


def ppo_objective(
    policy: EdgePolicy,
    old_policy: EdgePolicy,
    batch: Sequence[RLSample],
    advantages: np.ndarray,
    clip_eps: float,
    kl_beta: float,
):
    """Clipped surrogate minus beta * KL(pi || pi_old), with its exact gradient"""
    grad = np.zeros_like(policy.theta)
    surrogate = kl = ratio_sum = 0.0
    clipped = 0
    for sample, adv in zip(batch, advantages):
        dist = policy.distribution(sample.task, sample.ctx)
        old_dist = old_policy.distribution(sample.task, sample.ctx)
        ratio = math.exp(policy.log_prob(sample.task, sample.ctx, sample.action, dist) - sample.logp)
        bounded = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
        ratio_sum += ratio
        if ratio * adv <= bounded * adv:
            surrogate += ratio * adv
            grad += adv * ratio * policy.grad_log_prob(sample.task, sample.ctx, sample.action, dist)
        else:
            surrogate += bounded * adv
            clipped += 1
        kl += policy_kl(dist, old_dist)
        grad -= kl_beta * policy_kl_grad(policy, dist, old_dist)
    n = len(batch)
    stats = PPOStats(
        objective=(surrogate - kl_beta * kl) / n,
        surrogate=surrogate / n,
        kl=kl / n,
        mean_ratio=ratio_sum / n,
        clip_frac=clipped / n,
    )
    return stats.objective, grad / n, stats


@dataclass
class UpdateDiagnostics:
    update: int
    mean_reward: float
    kl: float
    clip_frac: float
    schema_rate: float
    composite: float
    anchored: bool = False
    initial_ratio: float = 1.0
    initial_kl: float = 0.0
    # Completed tasks when the update ran
    task: int = 0


def ppo_update(policy: EdgePolicy, batch: Sequence[RLSample], config: PPOConfig):
    """Gradient ascent on the clipped, KL-penalized surrogate; returns (policy', stats)"""
    if not batch:
        raise UsageError("PPO update needs a non-empty batch")
    if any(sample.logp is None for sample in batch):
        raise UsageError("PPO batch is missing stored log-probabilities")
    old = policy.copy()
    current = policy.copy()
    advantages = compute_advantages(batch, config.gamma)
    initial = None
    for _ in range(config.epochs):
        _, grad, stats = ppo_objective(current, old, batch, advantages, config.clip_eps, config.kl_beta)
        initial = initial or stats
        current.theta += config.lr * grad
    _, _, final = ppo_objective(current, old, batch, advantages, config.clip_eps, config.kl_beta)
    return current, {'initial': initial, 'final': final, 'advantages': advantages}


def sft_anchor_step(
    policy: EdgePolicy,
    reference: EdgePolicy,
    anchor_set: Sequence[tuple[Task, Context]],
    lr: float,
) -> EdgePolicy:
    """One gradient step on H(pi_SFT, pi) averaged over anchor contexts"""
    if not anchor_set:
        return policy.copy()
    grad = np.zeros_like(policy.theta)
    for task, ctx in anchor_set:
        grad += cross_entropy_grad(policy, reference.distribution(task, ctx), policy.distribution(task, ctx))
    updated = policy.copy()
    updated.theta -= lr * grad / len(anchor_set)
    return updated


def forward_kl(policy: EdgePolicy, reference: EdgePolicy, contexts: Sequence[tuple[Task, Context]]) -> float:
    """Mean KL(pi_ref || pi) over contexts"""
    return float(np.mean([
        policy_kl(reference.distribution(task, ctx), policy.distribution(task, ctx))
        for task, ctx in contexts
    ]))


def composite_objective(
    policy: EdgePolicy,
    policy_t: EdgePolicy,
    reference: EdgePolicy,
    batch: Sequence[RLSample],
    eta: float,
    mu: float,
    gamma: float = 0.99,
) -> float:
    """Importance-weighted advantage minus eta*KL(pi||pi_t) minus mu*KL(pi_SFT||pi)"""
    if not batch:
        raise UsageError("composite objective needs a non-empty batch")
    advantages = compute_advantages(batch, gamma)
    advantage_term = reverse = forward = 0.0
    for sample, adv in zip(batch, advantages):
        dist = policy.distribution(sample.task, sample.ctx)
        dist_t = policy_t.distribution(sample.task, sample.ctx)
        ratio = math.exp(
            policy.log_prob(sample.task, sample.ctx, sample.action, dist)
            - policy_t.log_prob(sample.task, sample.ctx, sample.action, dist_t)
        )
        advantage_term += ratio * adv
        reverse += policy_kl(dist, dist_t)
        forward += policy_kl(reference.distribution(sample.task, sample.ctx), dist)
    n = len(batch)
    return (advantage_term - eta * reverse - mu * forward) / n


def schema_violation_rate(policy: EdgePolicy, contexts: Sequence[tuple[Task, Context]]) -> float:
    """Mean probability of emitting a malformed action"""
    rates = []
    for task, ctx in contexts:
        dist = policy.distribution(task, ctx)
        rates.append(dist.tool_probs[dist.malformed_position])
    return float(np.mean(rates)) if rates else 0.0


def rl_batch(caches: Caches, policy: EdgePolicy, size: int) -> list[RLSample]:
    """Most recent RL samples with log-probs re-stamped under the current policy"""
    recent = caches.rl_snapshot()[-size:]
    return [
        RLSample(
            task=s.task, ctx=s.ctx, action=s.action,
            logp=policy.log_prob(s.task, s.ctx, s.action),
            reward=s.reward, episode=s.episode, step=s.step,
        )
        for s in recent
    ]


def two_stage_update(
    policy: EdgePolicy,
    caches: Caches,
    sft_reference: EdgePolicy,
    config: PPOConfig,
    anchor_set: Sequence[tuple[Task, Context]] = (),
    start_update: int = 0,
):
    """PPO updates on the RL cache; after every M of them an SFT anchoring step"""
    if not caches.rl:
        raise UsageError("two-stage update needs a non-empty RL cache")
    rows = []
    for u in range(config.updates_per_window):
        index = start_update + u + 1
        batch = rl_batch(caches, policy, config.batch_size)
        before = policy
        policy, stats = ppo_update(policy, batch, config)
        anchored = config.anchor and index % config.anchor_period == 0
        if anchored:
            for _ in range(config.anchor_steps):
                policy = sft_anchor_step(policy, sft_reference, anchor_set, config.anchor_lr)
        contexts = [(s.task, s.ctx) for s in batch]
        rows.append(UpdateDiagnostics(
            update=index,
            mean_reward=float(np.mean([s.reward for s in batch])),
            kl=stats['final'].kl,
            clip_frac=stats['final'].clip_frac,
            schema_rate=schema_violation_rate(policy, contexts),
            composite=composite_objective(
                policy, before, sft_reference, batch, config.kl_beta, config.anchor_weight, config.gamma),
            anchored=anchored,
            initial_ratio=stats['initial'].mean_ratio,
            initial_kl=stats['initial'].kl,
        ))
    return policy, rows


@dataclass(frozen=True)
class SFTConfig:
    lr: float = 0.5
    epochs: int = 2
    batch: int = 16
    seed: int = 0


def sft_fit(
    policy: EdgePolicy,
    examples: Sequence[tuple[Task, Context, StructuredAction]],
    config: Optional[SFTConfig] = None,
):
    """Mini-batch descent on mean -log pi(u | x, H); returns (policy', per-epoch loss)"""
    config = config or SFTConfig()
    if not examples:
        raise UsageError("SFT needs at least one example")
    policy = policy.copy()
    rng = np.random.default_rng(config.seed)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(examples), config.batch):
            chunk = [examples[i] for i in order[start:start + config.batch]]
            grad = np.zeros_like(policy.theta)
            for task, ctx, action in chunk:
                grad += policy.grad_log_prob(task, ctx, action)
            policy.theta += config.lr * grad / len(chunk)
        losses.append(-float(np.mean([policy.log_prob(t, c, a) for t, c, a in examples])))
    return policy, losses
