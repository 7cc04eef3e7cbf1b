"""
Per-step latency, cost and quality, task aggregation, and the analytic
score model used for threshold theory.
"""
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy import stats

from lab.exceptions import DomainError, UsageError
from lab.services.net_model import NetworkState

EDGE = 'edge'
CLOUD = 'cloud'


@dataclass(frozen=True)
class LatencyParams:
    edge_latency: float = 0.5
    # Optional per-token edge decode time; 0 keeps edge latency constant
    edge_latency_per_token: float = 0.0
    cloud_compute: float = 0.6
    payload_bytes: float = 3_000_000

    def __post_init__(self):
        if min(self.edge_latency, self.edge_latency_per_token, self.cloud_compute, self.payload_bytes) < 0:
            raise UsageError("Latency parameters must be non-negative")


@dataclass(frozen=True)
class CostParams:
    alpha: float = 0.01
    c_tok: float = 2e-6
    lam: float = 10.0

    def __post_init__(self):
        if self.alpha < 0 or self.c_tok < 0:
            raise UsageError("alpha and c_tok must be non-negative")
        if not self.lam > 0:
            raise UsageError("lambda must be strictly positive")


@dataclass(frozen=True)
class TokenParams:
    """Cloud tokens per step: base + per_step * (context entries)"""
    base: int = 400
    per_step: int = 100

    def cloud_tokens(self, context_steps: int) -> int:
        return self.base + self.per_step * context_steps


@dataclass(frozen=True)
class StepOutcome:
    decision: str
    latency: float
    tokens: int
    quality: float
    cost: float

    def __post_init__(self):
        if self.decision == EDGE and self.tokens != 0:
            raise DomainError("Edge steps carry no cloud tokens")
        if not 0.0 <= self.quality <= 1.0:
            raise DomainError(f"Step quality must lie in [0, 1], got {self.quality}")


@dataclass(frozen=True)
class TaskAggregate:
    q: float
    c: float
    j: float


def transmission_time(payload_bytes: float, bw: float) -> float:
    """8 * payload / bw seconds"""
    if not bw > 0:
        raise DomainError(f"Bandwidth must be positive, got {bw}")
    return 8.0 * payload_bytes / bw


def step_latency(decision: str, params: LatencyParams, state: NetworkState, edge_tokens: int = 0) -> float:
    if decision == EDGE:
        return params.edge_latency + params.edge_latency_per_token * edge_tokens
    if decision == CLOUD:
        return state.rtt + transmission_time(params.payload_bytes, state.bw) + params.cloud_compute
    raise UsageError(f"Unknown decision '{decision}'")


def step_cost(latency: float, tokens: int, params: CostParams) -> float:
    return params.alpha * latency + params.c_tok * tokens


def step_quality(schema_valid: bool, evaluator_score: float) -> float:
    """Any schema violation forces quality to zero"""
    if not 0.0 <= evaluator_score <= 1.0:
        raise DomainError(f"Evaluator score must lie in [0, 1], got {evaluator_score}")
    return float(evaluator_score) if schema_valid else 0.0


def task_aggregate(steps: Iterable[StepOutcome], lam: float) -> TaskAggregate:
    """Q = mean step quality, C = summed step cost, J = Q - lam * C"""
    steps = list(steps)
    if not steps:
        raise UsageError("Cannot aggregate a task with no steps")
    q = float(np.mean([s.quality for s in steps]))
    c = float(np.sum([s.cost for s in steps]))
    return TaskAggregate(q=q, c=c, j=q - lam * c)


def realize_step(
    decision: str,
    state: NetworkState,
    schema_valid: bool,
    evaluator_score: float,
    context_steps: int,
    latency: LatencyParams,
    costs: CostParams,
    tokens: TokenParams,
    edge_tokens: int = 0,
) -> StepOutcome:
    """Combine latency, token, cost and quality models into one outcome"""
    n_tokens = tokens.cloud_tokens(context_steps) if decision == CLOUD else 0
    seconds = step_latency(decision, latency, state, edge_tokens)
    return StepOutcome(
        decision=decision,
        latency=seconds,
        tokens=n_tokens,
        quality=step_quality(schema_valid, evaluator_score),
        cost=step_cost(seconds, n_tokens, costs),
    )


RealFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ScoreModel:
    """Analytic conditional model over router scores"""
    density: RealFn
    q_edge: RealFn
    q_cloud: RealFn
    c_edge: RealFn
    c_cloud: RealFn
    support: tuple[float, float]
    name: str = field(default='custom')

    def delta_q(self, s):
        s = np.asarray(s, dtype=float)
        return self.q_cloud(s) - self.q_edge(s)

    def delta_c(self, s):
        s = np.asarray(s, dtype=float)
        return self.c_cloud(s) - self.c_edge(s)

    def rho(self, s):
        """Local benefit-cost ratio dQ/dC"""
        return self.delta_q(s) / self.delta_c(s)

    def contains(self, tau: float) -> bool:
        lo, hi = self.support
        return lo <= tau <= hi


DEFAULT_SCORE_MEAN = 2.5
DEFAULT_SCORE_STD = 1.5
DEFAULT_DELTA_C = 0.01


def default_score_model() -> ScoreModel:
    """N(2.5, 1.5) scores on [-6, 12]; Q_C = exp(-s), C_C = 0.01, edge terms zero"""
    dist = stats.norm(loc=DEFAULT_SCORE_MEAN, scale=DEFAULT_SCORE_STD)
    return ScoreModel(
        density=dist.pdf,
        q_edge=np.zeros_like,
        q_cloud=lambda s: np.exp(-np.asarray(s, dtype=float)),
        c_edge=np.zeros_like,
        c_cloud=lambda s: np.full_like(np.asarray(s, dtype=float), DEFAULT_DELTA_C),
        support=(-6.0, 12.0),
        name='default',
    )
