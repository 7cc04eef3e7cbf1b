"""
End-to-end routing experiments over the toy world and network traces.

An experiment first runs the offline block (SFT fit, reward-model
initialisation, threshold/controller calibration on counterfactual records),
then streams the corpus through the router. Every idle_period tasks it runs an
idle window: PPO with periodic SFT anchoring, near-threshold uploads, a
reward-model refresh and controller recalibration.

Randomness inside an episode comes from per-step derived generators, so the
counterfactual branch sees the same edge sample and cloud draw as the routed
branch and never perturbs it.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from agents.services.learning import (
    CachedTuple,
    Caches,
    PPOConfig,
    PreferencePair,
    RewardModel,
    RLSample,
    RMTrainConfig,
    SFTConfig,
    UpdateDiagnostics,
    near_threshold_sample,
    pairwise_accuracy,
    preference_pairs,
    rm_score,
    rm_train,
    sft_fit,
    two_stage_update,
)
from agents.services.toyworld import (
    FINISH,
    Context,
    EdgePolicy,
    StructuredAction,
    Task,
    action_tokens,
    cloud_oracle,
    edge_policy_sample,
    evaluate_quality,
    generate_tasks,
    initial_context,
    sft_examples,
    summarize,
    update_context,
    validate_schema,
)
from lab.exceptions import TraceExhausted, UsageError
from lab.services.controllers import (
    FuncDynParams,
    PolicyNet,
    RouteDecision,
    calibrate_funcdyn,
    policynet_labels,
    policynet_train,
    recalibrate_threshold,
    route_fixed,
    route_funcdyn,
    route_policynet,
)
from lab.services.econ import (
    CLOUD,
    EDGE,
    CostParams,
    LatencyParams,
    StepOutcome,
    TokenParams,
    realize_step,
    task_aggregate,
)
from lab.services.net_model import (
    BAD,
    GOOD,
    MID,
    MBIT,
    MS,
    DriftParams,
    Regime,
    NetworkState,
    TraceStep,
    get_regime,
    make_trace,
    tile_schedule,
)
from lab.services.theory import empirical_tau0

logger = logging.getLogger(__name__)

FIXED = 'fixed'
FUNCDYN = 'funcdyn'
POLICYNET = 'policynet'
ALL_EDGE = 'all-edge'
ALL_CLOUD = 'all-cloud'
ONESHOT_ROUTER = 'oneshot-router'
FIXED_CASCADE = 'fixed-cascade'

CONTROLLER_CHOICES = [
    (FIXED, 'Fixed threshold'),
    (FUNCDYN, 'Network-aware threshold'),
    (POLICYNET, 'PolicyNet'),
    (ALL_EDGE, 'All edge'),
    (ALL_CLOUD, 'All cloud'),
    (ONESHOT_ROUTER, 'One-shot router (approximation)'),
    (FIXED_CASCADE, 'Fixed-threshold cascade (approximation)'),
]

# Random stream ids; combined with (seed, phase, task, step)
EDGE_STREAM = 1
CLOUD_STREAM = 2
RM_INIT_STREAM = 3

EXPERIMENT_PHASE = 0
CALIBRATION_PHASE = 1
HOLDOUT_PHASE = 2

# Offsets that separate auxiliary corpora from the evaluation corpus
SFT_CORPUS_OFFSET = 1_000
CALIBRATION_CORPUS_OFFSET = 2_000
HOLDOUT_CORPUS_OFFSET = 3_000


def step_rng(seed: int, phase: int, stream: int, task_index: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase, stream, task_index, step])


def ewma_update(q_hat: float, quality: float, beta: float) -> float:
    """(1 - beta) * q_hat + beta * quality"""
    return (1.0 - beta) * q_hat + beta * quality


@dataclass(frozen=True)
class CorpusSpec:
    size: int = 2000
    tool_range: tuple[int, int] = (10, 20)
    target_len_range: tuple[int, int] = (1, 8)
    prior_range: tuple[int, int] = (0, 8)
    canonical_prob: float = 0.8

    def generate(self, count: int, seed: int) -> list[Task]:
        return generate_tasks(
            count,
            tool_range=self.tool_range,
            target_len_range=self.target_len_range,
            prior_range=self.prior_range,
            seed=seed,
            canonical_prob=self.canonical_prob,
        )


DEFAULT_SCHEDULE = ((GOOD, 200), (MID, 200), (BAD, 200))


@dataclass(frozen=True)
class RunConfig:
    controller: str = FIXED
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    schedule: tuple[tuple[str, int], ...] = DEFAULT_SCHEDULE
    regimes: dict = field(default_factory=dict)
    drift: DriftParams = field(default_factory=DriftParams)
    latency: LatencyParams = field(default_factory=LatencyParams)
    costs: CostParams = field(default_factory=CostParams)
    tokens: TokenParams = field(default_factory=TokenParams)
    # Fixed threshold; None uses the calibrated tau0
    tau: Optional[float] = None
    funcdyn: FuncDynParams = field(default_factory=FuncDynParams)
    policynet: Optional[PolicyNet] = None
    policynet_widths: tuple[int, ...] = (4, 50, 50, 1)
    policynet_activation: str = 'tanh'
    policynet_lr: float = 0.05
    policynet_epochs: int = 200
    policynet_batch: int = 32
    p_correct: float = 0.98
    learning: bool = False
    counterfactual: bool = False
    recalibrate: bool = True
    idle_period: int = 64
    beta: float = 0.2
    q_hat_init: float = 0.5
    step_cap: int = 12
    near_threshold_fraction: float = 0.05
    band_scale: float = 0.25
    cache_capacity: int = 10_000
    sft_tasks: int = 300
    calibration_tasks: int = 200
    rm_init_pairs: int = 2000
    ppo: PPOConfig = field(default_factory=PPOConfig)
    rm: RMTrainConfig = field(default_factory=RMTrainConfig)
    sft: SFTConfig = field(default_factory=SFTConfig)
    seed: int = 0
    # Pre-built corpus or trace, e.g. loaded from files
    tasks: Optional[tuple[Task, ...]] = None
    trace: Optional[tuple[TraceStep, ...]] = None

    def __post_init__(self):
        if self.controller not in dict(CONTROLLER_CHOICES):
            raise UsageError(f"Unknown controller '{self.controller}'")
        if not 0.0 < self.beta <= 1.0:
            raise UsageError("EWMA beta must lie in (0, 1]")
        if self.idle_period < 1 or self.step_cap < 1:
            raise UsageError("idle_period and step_cap must be at least 1")
        if self.seed < 0:
            raise UsageError("seed must be non-negative")

    def regime(self, name: str) -> Regime:
        return self.regimes[name] if name in self.regimes else get_regime(name)

    def build_tasks(self) -> list[Task]:
        if self.tasks is not None:
            if not self.tasks:
                raise UsageError("Corpus is empty")
            return list(self.tasks)
        return self.corpus.generate(self.corpus.size, self.seed)

    def build_trace(self, n_tasks: int) -> list[TraceStep]:
        if self.trace is not None:
            if not self.trace:
                raise UsageError("Trace is empty")
            return list(self.trace)
        schedule = [(self.regime(name), steps) for name, steps in self.schedule]
        return make_trace(tile_schedule(schedule, n_tasks * self.step_cap), self.drift, self.seed)


class TraceCursor:
    """Sequential reader over a trace; cyclic cursors wrap instead of failing"""

    def __init__(self, trace: Sequence[TraceStep], cyclic: bool = False):
        if not trace:
            raise UsageError("Trace is empty")
        self.trace = trace
        self.cyclic = cyclic
        self.position = 0

    def next(self) -> TraceStep:
        if self.position >= len(self.trace):
            if not self.cyclic:
                raise TraceExhausted(self.position, len(self.trace))
            self.position = 0
        step = self.trace[self.position]
        self.position += 1
        return step


class Controller:
    """Routing rule plus the EWMA quality history it conditions on"""

    def __init__(
        self,
        kind: str,
        tau: float = 0.0,
        funcdyn: Optional[FuncDynParams] = None,
        net: Optional[PolicyNet] = None,
        beta: float = 0.2,
        q_hat: float = 0.5,
        recalibrate: bool = True,
    ):
        if kind == POLICYNET and net is None:
            raise UsageError("PolicyNet controller needs a network")
        if kind == FUNCDYN and funcdyn is None:
            raise UsageError("FuncDyn controller needs parameters")
        self.kind = kind
        self.tau = tau
        self.funcdyn = funcdyn
        self.net = net
        self.beta = beta
        self.q_hat = q_hat
        self.recalibrates = recalibrate and kind in (FIXED, FUNCDYN, POLICYNET, ONESHOT_ROUTER)
        self._venue = None

    def start_task(self):
        self._venue = None

    def route(self, score: float, step: TraceStep, k: int) -> RouteDecision:
        if self.kind == ALL_EDGE:
            return route_fixed(score, -math.inf)
        if self.kind == ALL_CLOUD:
            return route_fixed(score, math.inf)
        if self.kind == FUNCDYN:
            return route_funcdyn(score, self.funcdyn, step.state, self.q_hat)
        if self.kind == POLICYNET:
            return route_policynet(self.net, step.state, score, self.q_hat)
        if self.kind == ONESHOT_ROUTER:
            if self._venue is None:
                self._venue = route_fixed(score, self.tau).choice
            return RouteDecision(choice=self._venue, score=score, threshold=self.tau)
        return route_fixed(score, self.tau)

    def boundary(self, decision: RouteDecision) -> float:
        """Threshold the near-threshold band is measured from"""
        if self.kind in (FIXED, FUNCDYN, FIXED_CASCADE, ONESHOT_ROUTER):
            return decision.threshold
        return self.tau

    def observe(self, quality: float):
        self.q_hat = ewma_update(self.q_hat, quality, self.beta)

    def recalibrate(self, old_scores: Sequence[float], new_scores: Sequence[float]):
        if not self.recalibrates or len(old_scores) == 0:
            return
        self.tau = recalibrate_threshold(old_scores, new_scores, self.tau)
        if self.funcdyn is not None:
            self.funcdyn = replace(self.funcdyn, tau0=recalibrate_threshold(old_scores, new_scores, self.funcdyn.tau0))
        if self.net is not None:
            lo, hi = self.net.norm.score
            lo, hi = recalibrate_threshold(old_scores, new_scores, lo), recalibrate_threshold(old_scores, new_scores, hi)
            if lo < hi:
                self.net = self.net.copy()
                self.net.norm = replace(self.net.norm, score=(lo, hi))


@dataclass(frozen=True)
class Counterfactual:
    q_edge: float
    c_edge: float
    q_cloud: float
    c_cloud: float
    j_edge: float
    j_cloud: float

    @property
    def cloud_better(self) -> bool:
        """Strict; ties count as edge-better"""
        return self.j_cloud > self.j_edge


@dataclass(frozen=True)
class StepRecord:
    task: str
    step: int
    score: float
    threshold: float
    decision: str
    regime: str
    rtt_ms: float
    bw_mbps: float
    latency_s: float
    cost: float
    quality: float
    schema_ok: bool
    q_hat: float
    counterfactual: Optional[Counterfactual] = None

    @property
    def cloud_better(self) -> Optional[bool]:
        return None if self.counterfactual is None else self.counterfactual.cloud_better


@dataclass(frozen=True)
class EdgeStep:
    """An edge-executed step kept for near-threshold uploads"""
    task: Task
    task_index: int
    step: int
    ctx: Context
    action: StructuredAction
    score: float
    boundary: float
    trace_step: TraceStep


@dataclass
class EpisodeResult:
    records: list[StepRecord]
    outcomes: list[StepOutcome]
    rl_samples: list[RLSample]
    cloud_tuples: list[CachedTuple]
    edge_steps: list[EdgeStep]


@dataclass
class EpisodeEnv:
    """What an episode needs beyond the task: models, router, trace and knobs"""
    policy: EdgePolicy
    rm: RewardModel
    controller: Controller
    cursor: TraceCursor
    config: RunConfig
    phase: int = EXPERIMENT_PHASE
    counterfactual: bool = False


def counterfactual_eval(
    task: Task,
    ctx: Context,
    step: TraceStep,
    edge_action: StructuredAction,
    cloud_action: StructuredAction,
    config: RunConfig,
) -> Counterfactual:
    """Both branches evaluated on one step under the same network state"""
    edge = _realize(EDGE, edge_action, task, ctx, step, config)
    cloud = _realize(CLOUD, cloud_action, task, ctx, step, config)
    lam = config.costs.lam
    return Counterfactual(
        q_edge=edge.quality, c_edge=edge.cost,
        q_cloud=cloud.quality, c_cloud=cloud.cost,
        j_edge=edge.quality - lam * edge.cost,
        j_cloud=cloud.quality - lam * cloud.cost,
    )


def _realize(decision: str, action: StructuredAction, task: Task, ctx: Context,
             step: TraceStep, config: RunConfig) -> StepOutcome:
    valid = validate_schema(action, task)
    return realize_step(
        decision, step.state, valid, evaluate_quality(action, task, ctx.cursor),
        len(ctx.entries), config.latency, config.costs, config.tokens,
        edge_tokens=action_tokens(action) if decision == EDGE else 0,
    )


def run_episode(task: Task, task_index: int, env: EpisodeEnv, caches: Optional[Caches] = None) -> EpisodeResult:
    """Route, execute and log one task until finish() or the step cap"""
    config = env.config
    result = EpisodeResult([], [], [], [], [])
    env.controller.start_task()
    ctx = initial_context(task)
    for k in range(config.step_cap):
        trace_step = env.cursor.next()
        edge_action, logp = edge_policy_sample(
            env.policy, task, ctx, step_rng(config.seed, env.phase, EDGE_STREAM, task_index, k))
        score = rm_score(env.rm, task, ctx, edge_action)
        q_hat = env.controller.q_hat
        decision = env.controller.route(score, trace_step, k)

        cloud_action = None
        if decision.choice == CLOUD or env.counterfactual:
            cloud_action = cloud_oracle(
                task, ctx, config.p_correct, step_rng(config.seed, env.phase, CLOUD_STREAM, task_index, k))
        executed = cloud_action if decision.choice == CLOUD else edge_action
        outcome = _realize(decision.choice, executed, task, ctx, trace_step, config)
        counterfactual = (
            counterfactual_eval(task, ctx, trace_step, edge_action, cloud_action, config)
            if env.counterfactual else None
        )

        result.outcomes.append(outcome)
        result.records.append(StepRecord(
            task=task.id, step=k, score=score, threshold=decision.threshold,
            decision=decision.choice, regime=trace_step.regime,
            rtt_ms=trace_step.state.rtt_ms, bw_mbps=trace_step.state.bw_mbps,
            latency_s=outcome.latency, cost=outcome.cost, quality=outcome.quality,
            schema_ok=validate_schema(executed, task), q_hat=q_hat,
            counterfactual=counterfactual,
        ))
        sample = RLSample(task=task, ctx=ctx, action=edge_action, logp=logp,
                          reward=score, episode=task.id, step=k)
        result.rl_samples.append(sample)
        if decision.choice == CLOUD:
            item = CachedTuple(task=task, ctx=ctx, edge_action=edge_action, cloud_action=cloud_action,
                               score=score, state=trace_step.state)
            result.cloud_tuples.append(item)
            if caches is not None:
                caches.add_cloud_tuple(item)
        else:
            result.edge_steps.append(EdgeStep(
                task, task_index, k, ctx, edge_action, score, env.controller.boundary(decision), trace_step))
        if caches is not None:
            caches.add_rl_sample(sample)

        env.controller.observe(outcome.quality)
        summary = summarize(executed) if decision.choice == CLOUD else None
        target_tool = task.target[ctx.cursor].tool
        ctx = update_context(ctx, decision.choice, executed.tool, summary)
        if executed.tool == target_tool:
            ctx = ctx.advanced()
        if executed.tool == FINISH:
            break
    return result


@dataclass(frozen=True)
class RegimeBreakdown:
    tasks: int
    steps: int
    mean_j: float
    mean_q: float
    total_c: float
    offload_rate: float


@dataclass(frozen=True)
class MetricsSummary:
    tasks: int
    steps: int
    mean_j: float
    mean_q: float
    mean_c: float
    total_c: float
    offload_rate: float
    schema_violation_rate: float
    per_regime: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        record = {key: getattr(self, key) for key in (
            'tasks', 'steps', 'mean_j', 'mean_q', 'mean_c', 'total_c', 'offload_rate', 'schema_violation_rate')}
        record['per_regime'] = {name: vars(b).copy() for name, b in sorted(self.per_regime.items())}
        return record


def summarize_metrics(episodes: Sequence[EpisodeResult], lam: float) -> MetricsSummary:
    """Aggregate per task, then average; a task's regime is that of its first step"""
    if not episodes:
        raise UsageError("No episodes to summarize")
    aggregates = [task_aggregate(e.outcomes, lam) for e in episodes]
    records = [r for e in episodes for r in e.records]
    by_regime = {}
    for episode, agg in zip(episodes, aggregates):
        by_regime.setdefault(episode.records[0].regime, []).append((episode, agg))
    per_regime = {}
    for name, items in by_regime.items():
        steps = [r for e, _ in items for r in e.records]
        per_regime[name] = RegimeBreakdown(
            tasks=len(items),
            steps=len(steps),
            mean_j=float(np.mean([a.j for _, a in items])),
            mean_q=float(np.mean([a.q for _, a in items])),
            total_c=float(np.sum([a.c for _, a in items])),
            offload_rate=float(np.mean([r.decision == CLOUD for r in steps])),
        )
    return MetricsSummary(
        tasks=len(episodes),
        steps=len(records),
        mean_j=float(np.mean([a.j for a in aggregates])),
        mean_q=float(np.mean([a.q for a in aggregates])),
        mean_c=float(np.mean([a.c for a in aggregates])),
        total_c=float(np.sum([a.c for a in aggregates])),
        offload_rate=float(np.mean([r.decision == CLOUD for r in records])),
        schema_violation_rate=float(np.mean([not r.schema_ok for r in records])),
        per_regime=per_regime,
    )


@dataclass
class LabState:
    """Outputs of the offline block"""
    sft_policy: EdgePolicy
    rm: RewardModel
    tau0: float
    funcdyn: FuncDynParams
    calibration: list[StepRecord]
    anchor_set: list[tuple[Task, Context]]
    net: Optional[PolicyNet] = None
    sft_losses: list[float] = field(default_factory=list)
    rm_accuracy: Optional[float] = None

    def calibration_rows(self) -> np.ndarray:
        """(score, j_edge, j_cloud, rtt_norm, bw_norm, q_hat, q_cloud - q_edge) per calibration step"""
        norm = self.funcdyn.norm
        return np.array([
            (r.score, r.counterfactual.j_edge, r.counterfactual.j_cloud,
             norm.normalize(r.rtt_ms * MS, 'rtt'), norm.normalize(r.bw_mbps * MBIT, 'bw'), r.q_hat,
             r.counterfactual.q_cloud - r.counterfactual.q_edge)
            for r in self.calibration
        ])


def policynet_dataset(records: Sequence[StepRecord], net: PolicyNet, lam: float):
    """Features (rtt_norm, bw_norm, s_norm, q_hat) and cloud-better labels from counterfactual records"""
    features = np.array([
        net.features(NetworkState(rtt=r.rtt_ms * MS, bw=r.bw_mbps * MBIT), r.score, r.q_hat)
        for r in records
    ])
    labels = policynet_labels(
        [(r.counterfactual.q_edge, r.counterfactual.c_edge, r.counterfactual.q_cloud, r.counterfactual.c_cloud)
         for r in records],
        lam,
    )
    return features, np.array(labels)


def offline_init(config: RunConfig, needs_policynet: Optional[bool] = None) -> LabState:
    """SFT fit, reward-model init, and controller calibration"""
    sft_tasks = config.corpus.generate(config.sft_tasks, config.seed + SFT_CORPUS_OFFSET)
    examples = sft_examples(sft_tasks)
    sft_policy, sft_losses = sft_fit(EdgePolicy(), examples, replace(config.sft, seed=config.seed))
    logger.info("SFT fit on %d examples, final loss %.4f", len(examples), sft_losses[-1])

    pairs = []
    for i, (task, ctx, _) in enumerate(examples[:config.rm_init_pairs]):
        rng = step_rng(config.seed, CALIBRATION_PHASE, RM_INIT_STREAM, i, 0)
        edge_action, _ = sft_policy.sample(task, ctx, rng)
        cloud_action = cloud_oracle(task, ctx, config.p_correct, rng)
        if edge_action.tool != cloud_action.tool or edge_action.args != cloud_action.args:
            pairs.append(PreferencePair(task, ctx, cloud_action, edge_action))
    if pairs:
        rm = rm_train(RewardModel(), pairs, replace(config.rm, seed=config.seed)).rm
        accuracy = pairwise_accuracy(rm, pairs)
    else:
        logger.warning("SFT policy matched the cloud on every init context; reward model stays at zero")
        rm, accuracy = RewardModel(), None
    logger.info("Reward model initialised on %d pairs", len(pairs))

    calibration_tasks = config.corpus.generate(config.calibration_tasks, config.seed + CALIBRATION_CORPUS_OFFSET)
    trace = config.build_trace(len(calibration_tasks))
    env = EpisodeEnv(
        policy=sft_policy, rm=rm,
        controller=Controller(ALL_EDGE, beta=config.beta, q_hat=config.q_hat_init),
        cursor=TraceCursor(trace, cyclic=True), config=config,
        phase=CALIBRATION_PHASE, counterfactual=True,
    )
    calibration = []
    for i, task in enumerate(calibration_tasks):
        calibration.extend(run_episode(task, i, env).records)

    anchor_set = [(t, c) for t, c, _ in sft_examples(sft_tasks[:config.ppo.anchor_tasks])]
    lab = LabState(
        sft_policy=sft_policy, rm=rm, tau0=0.0, funcdyn=config.funcdyn,
        calibration=calibration, anchor_set=anchor_set,
        sft_losses=sft_losses, rm_accuracy=accuracy,
    )
    rows = lab.calibration_rows()
    lab.tau0 = empirical_tau0(rows[:, :3])
    lab.funcdyn = calibrate_funcdyn(rows, config.funcdyn)
    logger.info("Calibrated tau0=%.4f, FuncDyn tau0=%.4f a=%.4f b=%.4f",
                lab.tau0, lab.funcdyn.tau0, lab.funcdyn.a_rtt, lab.funcdyn.b_bw)

    if needs_policynet is None:
        needs_policynet = config.controller == POLICYNET
    if config.policynet is not None:
        lab.net = config.policynet
    elif needs_policynet:
        lo, hi = float(rows[:, 0].min()), float(rows[:, 0].max())
        if not lo < hi:
            lo, hi = lo - 1.0, hi + 1.0
        net = PolicyNet(config.policynet_widths, config.policynet_activation,
                        norm=replace(config.funcdyn.norm, score=(lo, hi)), seed=config.seed)
        features, labels = policynet_dataset(calibration, net, config.costs.lam)
        trained = policynet_train(net, features, labels, config.policynet_lr, config.policynet_epochs,
                                  config.policynet_batch, config.seed)
        lab.net = trained.net
        logger.info("PolicyNet trained on %d records, final loss %.4f", len(labels), trained.losses[-1])
    return lab


def build_controller(config: RunConfig, lab: LabState) -> Controller:
    tau = lab.tau0 if config.tau is None else config.tau
    if config.controller == FIXED_CASCADE:
        tau = lab.tau0
    return Controller(
        config.controller,
        tau=tau,
        funcdyn=lab.funcdyn if config.controller == FUNCDYN else None,
        net=lab.net if config.controller == POLICYNET else None,
        beta=config.beta,
        q_hat=config.q_hat_init,
        recalibrate=config.recalibrate,
    )


@dataclass
class ExperimentResult:
    summary: MetricsSummary
    records: list[StepRecord]
    episodes: list[EpisodeResult]
    diagnostics: list[UpdateDiagnostics]
    window_offload: list[float]
    caches: Caches
    lab: LabState
    # Edge policy and reward model as they stand after the last idle window
    policy: EdgePolicy
    rm: RewardModel


class _ScoreStats:
    """Running mean and variance of observed scores"""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def push(self, value: float):
        self.n += 1
        delta = value - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (value - self.mean)

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.n) if self.n else 0.0


def run_experiment(config: RunConfig, lab: Optional[LabState] = None) -> ExperimentResult:
    """Offline init (unless given), then the online loop with idle-window updates"""
    tasks = config.build_tasks()
    trace = config.build_trace(len(tasks))
    lab = lab or offline_init(config)
    if config.controller == POLICYNET and lab.net is None:
        raise UsageError("PolicyNet controller needs a trained network")

    env = EpisodeEnv(
        policy=lab.sft_policy.copy(), rm=lab.rm.copy(), controller=build_controller(config, lab),
        cursor=TraceCursor(trace), config=config, counterfactual=config.counterfactual,
    )
    caches = Caches(config.cache_capacity, config.cache_capacity)
    scores = _ScoreStats()
    episodes, diagnostics, window_offload = [], [], []
    window_edge_steps = []
    window_samples = []
    updates = 0
    for i, task in enumerate(tasks):
        episode = run_episode(task, i, env, caches)
        episodes.append(episode)
        for record in episode.records:
            scores.push(record.score)
        window_edge_steps.extend(episode.edge_steps)
        window_samples.extend(episode.rl_samples)

        if (i + 1) % config.idle_period == 0 or i + 1 == len(tasks):
            chunk = [r for e in episodes[-((i % config.idle_period) + 1):] for r in e.records]
            window_offload.append(float(np.mean([r.decision == CLOUD for r in chunk])))
        if config.learning and (i + 1) % config.idle_period == 0 and i + 1 < len(tasks):
            rows = idle_window(env, caches, lab, window_edge_steps, window_samples, scores.std, updates)
            for row in rows:
                row.task = i + 1
            diagnostics.extend(rows)
            updates += len(rows)
            window_edge_steps, window_samples = [], []

    summary = summarize_metrics(episodes, config.costs.lam)
    logger.info("Experiment %s: %d tasks, mean J %.6f, offload %.4f",
                config.controller, summary.tasks, summary.mean_j, summary.offload_rate)
    return ExperimentResult(
        summary=summary,
        records=[r for e in episodes for r in e.records],
        episodes=episodes,
        diagnostics=diagnostics,
        window_offload=window_offload,
        caches=caches,
        lab=lab,
        policy=env.policy,
        rm=env.rm,
    )


def idle_window(
    env: EpisodeEnv,
    caches: Caches,
    lab: LabState,
    edge_steps: Sequence[EdgeStep],
    samples: Sequence[RLSample],
    score_std: float,
    start_update: int,
) -> list[UpdateDiagnostics]:
    """PPO + anchor, near-threshold uploads, RM refresh, controller recalibration"""
    config = env.config
    rows = []
    if caches.rl:
        env.policy, rows = two_stage_update(
            env.policy, caches, lab.sft_policy, config.ppo, lab.anchor_set, start_update)

    rng = np.random.default_rng([config.seed, EXPERIMENT_PHASE, RM_INIT_STREAM, start_update])
    band = config.band_scale * score_std
    chosen = near_threshold_sample(
        [(step.score, step.boundary) for step in edge_steps], band, config.near_threshold_fraction, rng)
    for index in chosen:
        step = edge_steps[index]
        cloud_action = cloud_oracle(
            step.task, step.ctx, config.p_correct,
            step_rng(config.seed, EXPERIMENT_PHASE, CLOUD_STREAM, step.task_index, step.step))
        caches.add_cloud_tuple(CachedTuple(
            task=step.task, ctx=step.ctx, edge_action=step.action, cloud_action=cloud_action,
            score=step.score, state=step.trace_step.state, near_threshold=True))

    pairs = preference_pairs(caches.rm_snapshot())
    if pairs:
        old_rm = env.rm
        env.rm = rm_train(old_rm, pairs, replace(config.rm, seed=config.seed + start_update)).rm
        old_scores = [old_rm.score(s.task, s.ctx, s.action) for s in samples]
        new_scores = [env.rm.score(s.task, s.ctx, s.action) for s in samples]
        env.controller.recalibrate(old_scores, new_scores)
    logger.info("Idle window: %d updates, %d uploads, %d RM pairs", len(rows), len(chosen), len(pairs))
    return rows


@dataclass(frozen=True)
class RiskCoveragePoint:
    tau: float
    coverage: float
    selective_risk: float


def risk_coverage_curve(records: Sequence[tuple[float, bool]], tau_grid: Sequence[float]) -> list[RiskCoveragePoint]:
    """Coverage and should-have-offloaded risk of accepting s >= tau at the edge"""
    if not records:
        raise UsageError("risk_coverage_curve needs at least one record")
    scores = np.array([r[0] for r in records], dtype=float)
    cloud_better = np.array([bool(r[1]) for r in records])
    curve = []
    for tau in tau_grid:
        accepted = scores >= tau
        n = int(accepted.sum())
        risk = float(cloud_better[accepted].sum() / n) if n else 0.0
        curve.append(RiskCoveragePoint(tau=float(tau), coverage=n / len(scores), selective_risk=risk))
    return curve


def score_grid(scores: Sequence[float], nodes: int = 101) -> np.ndarray:
    """Evenly spaced thresholds spanning the observed scores"""
    scores = np.asarray(scores, dtype=float)
    return np.linspace(scores.min(), scores.max(), nodes)


def risk_at_coverage(records: Sequence[tuple[float, bool]], coverages: Sequence[float]) -> np.ndarray:
    """Selective risk when the top ceil(c * N) scores are accepted"""
    ordered = sorted(records, key=lambda r: -r[0])
    errors = np.cumsum([bool(r[1]) for r in ordered])
    risks = []
    for c in coverages:
        k = int(math.ceil(c * len(ordered) - 1e-9))
        risks.append(errors[k - 1] / k if k else 0.0)
    return np.array(risks, dtype=float)


def curve_dominance(pre: Sequence[tuple[float, bool]], post: Sequence[tuple[float, bool]], nodes: int = 101) -> float:
    """Fraction of matched-coverage nodes where post risk <= pre risk"""
    coverages = np.linspace(0.0, 1.0, nodes)
    return float(np.mean(risk_at_coverage(post, coverages) <= risk_at_coverage(pre, coverages) + 1e-12))


def holdout_episodes(config: RunConfig, lab: LabState) -> list[EpisodeResult]:
    """All-edge counterfactual episodes on a corpus kept apart from every other phase"""
    tasks = config.corpus.generate(config.calibration_tasks, config.seed + HOLDOUT_CORPUS_OFFSET)
    env = EpisodeEnv(
        policy=lab.sft_policy, rm=lab.rm,
        controller=Controller(ALL_EDGE, beta=config.beta, q_hat=config.q_hat_init),
        cursor=TraceCursor(config.build_trace(len(tasks)), cyclic=True), config=config,
        phase=HOLDOUT_PHASE, counterfactual=True,
    )
    return [run_episode(task, i, env) for i, task in enumerate(tasks)]


def rescored_risk_records(episodes: Sequence[EpisodeResult], rm: RewardModel) -> list[tuple[float, bool]]:
    """(score, cloud_better) with each step's edge action rescored under rm"""
    return [
        (rm.score(sample.task, sample.ctx, sample.action), record.cloud_better)
        for episode in episodes
        for sample, record in zip(episode.rl_samples, episode.records)
    ]


@dataclass(frozen=True)
class ScanRow:
    lam: float
    tau: float
    q: float
    c: float
    j: float


def best_rows(rows: Sequence[ScanRow]) -> list[ScanRow]:
    """The J-maximizing row per lambda, smallest tau on ties"""
    best = {}
    for row in rows:
        if row.lam not in best or row.j > best[row.lam].j:
            best[row.lam] = row
    return [best[lam] for lam in sorted(best)]


def replay_thresholds(episodes: Sequence[EpisodeResult], tau_grid: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """
    Mean per-task (Q, C) at each tau from one counterfactual run: a step takes
    its edge outcome when s >= tau and its cloud outcome otherwise.
    """
    taus = np.asarray(tau_grid, dtype=float)
    if not episodes:
        raise UsageError("replay_thresholds needs at least one episode")
    q = np.zeros(len(taus))
    c = np.zeros(len(taus))
    for episode in episodes:
        if any(r.counterfactual is None for r in episode.records):
            raise UsageError("Threshold replay needs counterfactual step records")
        scores = np.array([r.score for r in episode.records])
        branches = np.array([
            (r.counterfactual.q_edge, r.counterfactual.c_edge, r.counterfactual.q_cloud, r.counterfactual.c_cloud)
            for r in episode.records
        ])
        accept = scores[None, :] >= taus[:, None]
        q += np.where(accept, branches[:, 0], branches[:, 2]).mean(axis=1)
        c += np.where(accept, branches[:, 1], branches[:, 3]).sum(axis=1)
    return q / len(episodes), c / len(episodes)


def threshold_scan(
    config: RunConfig,
    tau_grid: Sequence[float],
    lambdas: Sequence[float],
    lab: Optional[LabState] = None,
) -> list[ScanRow]:
    """Mean (Q, C, J) per (lambda, tau), replayed from one frozen counterfactual run"""
    taus = sorted(float(t) for t in tau_grid)
    if not taus or not lambdas:
        raise UsageError("threshold_scan needs a non-empty tau grid and lambda list")
    frozen = replace(config, controller=FIXED, learning=False, counterfactual=True)
    lab = lab or offline_init(frozen, needs_policynet=False)
    q, c = replay_thresholds(run_experiment(frozen, lab).episodes, taus)
    rows = [
        ScanRow(lam=float(lam), tau=tau, q=float(q_tau), c=float(c_tau), j=float(q_tau - lam * c_tau))
        for lam in lambdas
        for tau, q_tau, c_tau in zip(taus, q, c)
    ]
    rows.sort(key=lambda r: (r.lam, r.tau))
    return rows


def argmax_tau(rows: Sequence[ScanRow]) -> dict:
    """lambda -> smallest tau attaining the best mean J"""
    return {row.lam: row.tau for row in best_rows(rows)}


def lambda_ordering(rows: Sequence[ScanRow]) -> tuple[dict, bool]:
    """argmax tau must be nonincreasing in lambda with at least one strict drop"""
    best = argmax_tau(rows)
    taus = [best[lam] for lam in sorted(best)]
    steps = np.diff(taus)
    return best, bool(len(taus) > 1 and np.all(steps <= 0) and np.any(steps < 0))


def regime_scan(
    config: RunConfig,
    regimes: Sequence[str],
    lam: float,
    tau_grid: Sequence[float],
    lab: Optional[LabState] = None,
):
    """argmax tau per single-regime trace; passes when it decreases along `regimes`"""
    lab = lab or offline_init(replace(config, learning=False), needs_policynet=False)
    best = {}
    for name in regimes:
        single = replace(config, schedule=((name, 600),), trace=None)
        rows = threshold_scan(single, tau_grid, [lam], lab)
        best[name] = argmax_tau(rows)[float(lam)]
    ordered = [best[name] for name in regimes]
    passed = all(a > b for a, b in zip(ordered, ordered[1:]))
    return best, passed


@dataclass
class PPOFrontier:
    """Best (tau, Q, C, J) per lambda with the edge policy before and after online PPO"""
    pre: list[ScanRow]
    post: list[ScanRow]
    updates: int


def ppo_frontier(
    config: RunConfig,
    tau_grid: Sequence[float],
    lambdas: Sequence[float],
    lab: Optional[LabState] = None,
) -> PPOFrontier:
    """
    Quality-cost frontier across lambda for the SFT edge policy and for the
    policy left by one learning run. Both sweeps route with the initial reward
    model so the thresholds share a score scale.
    """
    lab = lab or offline_init(replace(config, learning=False), needs_policynet=False)
    trained = run_experiment(replace(config, controller=FIXED, learning=True, counterfactual=False), lab)
    pre = best_rows(threshold_scan(config, tau_grid, lambdas, lab))
    post = best_rows(threshold_scan(config, tau_grid, lambdas, replace(lab, sft_policy=trained.policy)))
    logger.info("PPO frontier over %d lambdas after %d updates", len(pre), len(trained.diagnostics))
    return PPOFrontier(pre=pre, post=post, updates=len(trained.diagnostics))


@dataclass
class Comparison:
    summaries: dict
    differences: dict


def compare_controllers(config: RunConfig, kinds: Sequence[str], lab: Optional[LabState] = None) -> Comparison:
    """Same corpus, trace and seed under each controller kind"""
    if not kinds:
        raise UsageError("compare_controllers needs at least one controller kind")
    lab = lab or offline_init(config, needs_policynet=POLICYNET in kinds)
    summaries = {kind: run_experiment(replace(config, controller=kind), lab).summary for kind in kinds}
    differences = {
        f'{a}-{b}': summaries[a].mean_j - summaries[b].mean_j
        for i, a in enumerate(kinds) for b in kinds[i + 1:]
    }
    return Comparison(summaries=summaries, differences=differences)


@dataclass
class PairedResult:
    first: str
    second: str
    seeds: list[int]
    first_j: list[float]
    second_j: list[float]

    @property
    def wins(self) -> int:
        return sum(a >= b for a, b in zip(self.first_j, self.second_j))


def paired_seeds(config: RunConfig, kinds: tuple[str, str], seeds: Sequence[int]) -> PairedResult:
    """Count seeds where the first controller's mean J is at least the second's"""
    first, second = kinds
    result = PairedResult(first, second, list(seeds), [], [])
    for seed in seeds:
        comparison = compare_controllers(replace(config, seed=seed), [first, second])
        result.first_j.append(comparison.summaries[first].mean_j)
        result.second_j.append(comparison.summaries[second].mean_j)
    return result
