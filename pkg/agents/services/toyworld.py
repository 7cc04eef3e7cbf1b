"""
Synthetic tool-calling world.

Tasks are walks along a fixed workflow ring of networking tools, ending in
finish(). The edge agent is a linear-softmax policy with a tool head (plus a
"malformed output" entry) and one categorical head per argument slot. The
cloud agent is a near-oracle that returns the ground-truth next action.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import special

from lab.exceptions import UsageError
from lab.services.econ import CLOUD, EDGE

logger = logging.getLogger(__name__)

FINISH = 'finish'
MALFORMED = '<malformed>'
SUMMARY_LIMIT = 160
LENGTH_BUCKETS = 4


@dataclass(frozen=True)
class ToolSpec:
    name: str
    arg_slots: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        for slot, domain in self.arg_slots:
            if not domain:
                raise UsageError(f"Slot {self.name}.{slot} has an empty domain")

    @property
    def slot_names(self) -> tuple[str, ...]:
        return tuple(slot for slot, _ in self.arg_slots)

    def canonical_args(self) -> dict:
        return {slot: domain[0] for slot, domain in self.arg_slots}

    def to_record(self) -> dict:
        return {'name': self.name, 'args': {slot: list(domain) for slot, domain in self.arg_slots}}


@dataclass(frozen=True)
class StructuredAction:
    tool: str
    args: dict = field(default_factory=dict)
    thought: str = ''

    def to_record(self) -> dict:
        return {'name': self.tool, 'args': dict(sorted(self.args.items())), 'thought': self.thought}

    @classmethod
    def from_record(cls, record: dict) -> 'StructuredAction':
        return cls(tool=record['name'], args=dict(record.get('args', {})), thought=record.get('thought', ''))


def malformed_action() -> StructuredAction:
    return StructuredAction(tool=MALFORMED, args={}, thought='unparseable tool call')


@dataclass(frozen=True)
class Task:
    id: str
    query: str
    tools: tuple[ToolSpec, ...]
    target: tuple[StructuredAction, ...]
    prior_steps: tuple[str, ...]
    anchor: str

    def tool(self, name: str) -> Optional[ToolSpec]:
        for spec in self.tools:
            if spec.name == name:
                return spec
        return None

    @property
    def tool_names(self) -> tuple[str, ...]:
        return tuple(spec.name for spec in self.tools)

    def to_record(self) -> dict:
        return {
            'id': self.id,
            'query': self.query,
            'anchor': self.anchor,
            'available_tools': [spec.to_record() for spec in self.tools],
            'target': [action.to_record() for action in self.target],
            'prior_steps': list(self.prior_steps),
        }

    @classmethod
    def from_record(cls, record: dict) -> 'Task':
        tools = tuple(
            ToolSpec(name=t['name'], arg_slots=tuple((slot, tuple(domain)) for slot, domain in t['args'].items()))
            for t in record['available_tools']
        )
        target = tuple(StructuredAction.from_record(a) for a in record['target'])
        if not target or target[-1].tool != FINISH:
            raise UsageError(f"Task {record['id']}: target actions must end in {FINISH}()")
        return cls(
            id=record['id'],
            query=record['query'],
            tools=tools,
            target=target,
            prior_steps=tuple(record['prior_steps']),
            anchor=record['anchor'],
        )


@dataclass(frozen=True)
class ContextEntry:
    tool: str
    # None on the edge path; cloud-side entries carry the output summary
    summary: Optional[str] = None
    truncated: bool = False


@dataclass(frozen=True)
class Context:
    entries: tuple[ContextEntry, ...] = ()
    k: int = 0
    # Position in the task target the next step is evaluated against
    cursor: int = 0

    def advanced(self) -> 'Context':
        return replace(self, cursor=self.cursor + 1)

    def to_record(self) -> dict:
        return {
            'completed_steps': [
                entry.tool if entry.summary is None else [entry.tool, entry.summary]
                for entry in self.entries
            ],
            'k': self.k,
            'cursor': self.cursor,
        }

    @classmethod
    def from_record(cls, record: dict) -> 'Context':
        entries = tuple(
            ContextEntry(tool=e) if isinstance(e, str) else ContextEntry(tool=e[0], summary=e[1])
            for e in record['completed_steps']
        )
        return cls(entries=entries, k=record['k'], cursor=record['cursor'])


_DOMAIN_TARGETS = ('edge', 'metro', 'regional', 'core')
_VNFS = ('firewall', 'nat', 'cache', 'lb')
_BANDS = ('n78', 'n41', 'n28')
_HORIZONS = ('hour', 'day', 'week')

# Workflow ring: each tool's successor is the next entry (wrapping); finish is outside the ring
WORKFLOW = (
    ToolSpec('simulate_topology', (('nodes', ('5', '3', '8', '13')),)),
    ToolSpec('measure_rtt', (('target', _DOMAIN_TARGETS),)),
    ToolSpec('measure_bandwidth', (('direction', ('down', 'up')),)),
    ToolSpec('trace_route', (('target', _DOMAIN_TARGETS),)),
    ToolSpec('query_link_stats', (('window', ('5m', '1m', '15m')),)),
    ToolSpec('allocate_slice', (('profile', ('embb', 'urllc', 'mmtc')), ('priority', ('high', 'low')))),
    ToolSpec('configure_qos', (('class', ('gold', 'silver', 'bronze')),)),
    ToolSpec('deploy_function', (('vnf', _VNFS),)),
    ToolSpec('scale_function', (('vnf', _VNFS), ('replicas', ('2', '1', '4')))),
    ToolSpec('check_coverage', (('band', _BANDS),)),
    ToolSpec('estimate_interference', (('band', _BANDS),)),
    ToolSpec('schedule_handover', (('cell', ('a', 'b', 'c')),)),
    ToolSpec('fetch_alarms', (('severity', ('major', 'minor', 'critical')),)),
    ToolSpec('diagnose_fault', (('layer', ('ip', 'phy', 'mac')),)),
    ToolSpec('restart_node', (('node', ('edge', 'ran', 'core')),)),
    ToolSpec('update_routing', (('protocol', ('ospf', 'bgp', 'isis')),)),
    ToolSpec('verify_path'),
    ToolSpec('compute_capacity', (('horizon', _HORIZONS),)),
    ToolSpec('forecast_traffic', (('horizon', _HORIZONS),)),
    ToolSpec('lookup_inventory', (('site', ('north', 'south', 'east', 'west')),)),
    ToolSpec('validate_config'),
    ToolSpec('summarize_report', (('format', ('brief', 'full')),)),
    ToolSpec('notify_operator', (('channel', ('email', 'sms')),)),
)


class Catalog:
    """Global tool vocabulary, workflow successor map and feature layout"""

    def __init__(self, workflow: Sequence[ToolSpec] = WORKFLOW):
        self.tools = (ToolSpec(FINISH),) + tuple(workflow)
        self.index = {spec.name: i for i, spec in enumerate(self.tools)}
        if len(self.index) != len(self.tools):
            raise UsageError("Catalog tool names must be unique")
        ring = [spec.name for spec in workflow]
        self.successor = {name: ring[(i + 1) % len(ring)] for i, name in enumerate(ring)}
        self.slot_keys = [
            (tool_idx, slot_idx)
            for tool_idx, spec in enumerate(self.tools)
            for slot_idx in range(len(spec.arg_slots))
        ]
        self.slot_key_index = {key: i for i, key in enumerate(self.slot_keys)}

    @property
    def size(self) -> int:
        return len(self.tools)

    @property
    def workflow_names(self) -> list[str]:
        return [spec.name for spec in self.tools if spec.name != FINISH]

    @property
    def n_features(self) -> int:
        # one-hot last tool, normalized step index, length bucket, bias
        return self.size + 1 + LENGTH_BUCKETS + 1

    def spec(self, name: str) -> ToolSpec:
        return self.tools[self.index[name]]

    def encode_context(self, task: Task, ctx: Context) -> np.ndarray:
        x = np.zeros(self.n_features)
        last = last_tool(task, ctx)
        if last in self.index:
            x[self.index[last]] = 1.0
        length = len(task.target)
        x[self.size] = ctx.cursor / (length - 1) if length > 1 else 1.0
        x[self.size + 1 + min((length - 1) // 2, LENGTH_BUCKETS - 1)] = 1.0
        x[-1] = 1.0
        return x


DEFAULT_CATALOG = Catalog()


def last_tool(task: Task, ctx: Context) -> str:
    return ctx.entries[-1].tool if ctx.entries else task.anchor


def initial_context(task: Task) -> Context:
    """Pre-completed steps enter the context as bare tool ids"""
    return Context(entries=tuple(ContextEntry(tool=name) for name in task.prior_steps))


def generate_tasks(
    count: int,
    tool_range: tuple[int, int] = (10, 20),
    target_len_range: tuple[int, int] = (1, 8),
    prior_range: tuple[int, int] = (0, 8),
    seed: int = 0,
    canonical_prob: float = 0.8,
    catalog: Catalog = DEFAULT_CATALOG,
) -> list[Task]:
    """Deterministic synthetic corpus"""
    if count < 1:
        raise UsageError("Corpus size must be at least 1")
    for label, (lo, hi), floor in (
        ('tool_range', tool_range, 1),
        ('target_len_range', target_len_range, 1),
        ('prior_range', prior_range, 0),
    ):
        if not floor <= lo <= hi:
            raise UsageError(f"{label} must satisfy {floor} <= min <= max, got [{lo}, {hi}]")
    if tool_range[1] > catalog.size:
        raise UsageError(f"tool_range max {tool_range[1]} exceeds catalog size {catalog.size}")
    if target_len_range[1] > tool_range[0]:
        raise UsageError("Target length cannot exceed the minimum number of available tools")
    if not 0.0 <= canonical_prob <= 1.0:
        raise UsageError("canonical_prob must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    ring = catalog.workflow_names
    tasks = []
    for i in range(count):
        length = int(rng.integers(target_len_range[0], target_len_range[1] + 1))
        n_prior = int(rng.integers(prior_range[0], prior_range[1] + 1))
        n_tools = int(rng.integers(tool_range[0], tool_range[1] + 1))
        anchor = ring[int(rng.integers(len(ring)))]

        current = anchor
        prior = []
        for _ in range(n_prior):
            current = catalog.successor[current]
            prior.append(current)
        target_tools = []
        for _ in range(length - 1):
            current = catalog.successor[current]
            target_tools.append(current)
        target_tools.append(FINISH)

        required = set(target_tools)
        others = [name for name in catalog.index if name not in required]
        extra = max(0, n_tools - len(required))
        picked = list(rng.choice(others, size=extra, replace=False)) if extra else []
        names = sorted(required | set(picked), key=catalog.index.get)
        tools = tuple(catalog.spec(name) for name in names)

        target = []
        for name in target_tools:
            spec = catalog.spec(name)
            args = {}
            for slot, domain in spec.arg_slots:
                if len(domain) == 1 or rng.random() < canonical_prob:
                    args[slot] = domain[0]
                else:
                    args[slot] = domain[1 + int(rng.integers(len(domain) - 1))]
            target.append(StructuredAction(tool=name, args=args, thought=f'plan step {len(target) + 1}'))

        hints = ', '.join(f'{k}={v}' for action in target for k, v in sorted(action.args.items()))
        query = f'Continue the workflow after {anchor} for {length} step(s)'
        if hints:
            query += f'; use {hints}'
        tasks.append(Task(
            id=f'task-{seed}-{i:05d}',
            query=query,
            tools=tools,
            target=tuple(target),
            prior_steps=tuple(prior),
            anchor=anchor,
        ))
    return tasks


@dataclass
class HeadDistribution:
    """Factorized action distribution of the edge policy at one context"""
    x: np.ndarray
    # Tool-head columns: available catalog tools, then the malformed column
    columns: np.ndarray
    tool_probs: np.ndarray
    # column position -> [(slot key index, probabilities)]
    slot_probs: dict

    @property
    def malformed_position(self) -> int:
        return len(self.columns) - 1


class EdgePolicy:
    """Linear-softmax tool-calling policy over a flat parameter vector"""

    def __init__(self, catalog: Catalog = DEFAULT_CATALOG, theta: Optional[np.ndarray] = None):
        self.catalog = catalog
        n = catalog.n_features
        self._tool_shape = (n, catalog.size + 1)
        self._slot_shapes = [
            (n, len(catalog.tools[tool_idx].arg_slots[slot_idx][1]))
            for tool_idx, slot_idx in catalog.slot_keys
        ]
        sizes = [self._tool_shape[0] * self._tool_shape[1]] + [a * b for a, b in self._slot_shapes]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        if theta is None:
            self.theta = np.zeros(int(self._offsets[-1]))
        else:
            theta = np.asarray(theta, dtype=float)
            if theta.shape != (int(self._offsets[-1]),):
                raise UsageError("Parameter vector does not match the policy layout")
            self.theta = theta.copy()

    @property
    def malformed_column(self) -> int:
        return self.catalog.size

    def copy(self) -> 'EdgePolicy':
        return EdgePolicy(self.catalog, self.theta)

    def tool_weights(self, theta: Optional[np.ndarray] = None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        return theta[self._offsets[0]:self._offsets[1]].reshape(self._tool_shape)

    def slot_weights(self, key: int, theta: Optional[np.ndarray] = None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        return theta[self._offsets[key + 1]:self._offsets[key + 2]].reshape(self._slot_shapes[key])

    def distribution(self, task: Task, ctx: Context) -> HeadDistribution:
        x = self.catalog.encode_context(task, ctx)
        columns = np.array([self.catalog.index[name] for name in task.tool_names] + [self.malformed_column])
        tool_probs = special.softmax(x @ self.tool_weights()[:, columns])
        slot_probs = {}
        for pos, col in enumerate(columns[:-1]):
            heads = []
            for slot_idx in range(len(self.catalog.tools[col].arg_slots)):
                key = self.catalog.slot_key_index[(int(col), slot_idx)]
                heads.append((key, special.softmax(x @ self.slot_weights(key))))
            slot_probs[pos] = heads
        return HeadDistribution(x=x, columns=columns, tool_probs=tool_probs, slot_probs=slot_probs)

    def locate(self, task: Task, action: StructuredAction, dist: HeadDistribution):
        """Head indices that produce action: (tool position, [(key, value index)])"""
        spec = task.tool(action.tool)
        if spec is None or set(action.args) != set(spec.slot_names):
            return dist.malformed_position, []
        pos = int(np.flatnonzero(dist.columns == self.catalog.index[action.tool])[0])
        choices = []
        for (key, _), (slot, domain) in zip(dist.slot_probs[pos], spec.arg_slots):
            value = action.args[slot]
            if value not in domain:
                return dist.malformed_position, []
            choices.append((key, domain.index(value)))
        return pos, choices

    def log_prob(self, task: Task, ctx: Context, action: StructuredAction,
                 dist: Optional[HeadDistribution] = None) -> float:
        dist = dist or self.distribution(task, ctx)
        pos, choices = self.locate(task, action, dist)
        logp = np.log(dist.tool_probs[pos])
        for (key, probs), (_, value_idx) in zip(dist.slot_probs.get(pos, []), choices):
            logp += np.log(probs[value_idx])
        return float(logp)

    def grad_log_prob(self, task: Task, ctx: Context, action: StructuredAction,
                      dist: Optional[HeadDistribution] = None) -> np.ndarray:
        """d log pi(action) / d theta; each head contributes x (outer) (onehot - p)"""
        dist = dist or self.distribution(task, ctx)
        pos, choices = self.locate(task, action, dist)
        grad = np.zeros_like(self.theta)
        tool_grad = self.tool_weights(grad)
        residual = -dist.tool_probs.copy()
        residual[pos] += 1.0
        tool_grad[:, dist.columns] += np.outer(dist.x, residual)
        for (key, probs), (_, value_idx) in zip(dist.slot_probs.get(pos, []), choices):
            residual = -probs.copy()
            residual[value_idx] += 1.0
            self.slot_weights(key, grad)[:] += np.outer(dist.x, residual)
        return grad

    def sample(self, task: Task, ctx: Context, rng: np.random.Generator):
        """Sample the tool head then each slot head; returns (action, log-probability)"""
        dist = self.distribution(task, ctx)
        pos = int(rng.choice(len(dist.columns), p=dist.tool_probs))
        logp = float(np.log(dist.tool_probs[pos]))
        if pos == dist.malformed_position:
            return malformed_action(), logp
        spec = self.catalog.tools[int(dist.columns[pos])]
        args = {}
        for (key, probs), (slot, domain) in zip(dist.slot_probs[pos], spec.arg_slots):
            value_idx = int(rng.choice(len(domain), p=probs))
            args[slot] = domain[value_idx]
            logp += float(np.log(probs[value_idx]))
        return StructuredAction(tool=spec.name, args=args, thought=f'edge step {ctx.k + 1}'), logp


def edge_policy_sample(policy: EdgePolicy, task: Task, ctx: Context, rng: np.random.Generator):
    return policy.sample(task, ctx, rng)


def expected_quality(policy: EdgePolicy, task: Task, ctx: Context) -> float:
    """Exact expected evaluator score of one edge sample at ctx"""
    dist = policy.distribution(task, ctx)
    target = task.target[ctx.cursor]
    if target.tool not in task.tool_names:
        return 0.0
    pos = int(np.flatnonzero(dist.columns == policy.catalog.index[target.tool])[0])
    spec = task.tool(target.tool)
    exact = 1.0
    for (key, probs), (slot, domain) in zip(dist.slot_probs[pos], spec.arg_slots):
        exact *= probs[domain.index(target.args[slot])]
    return float(dist.tool_probs[pos] * (exact + 0.5 * (1.0 - exact)))


def cloud_oracle(task: Task, ctx: Context, p_correct: float, rng: np.random.Generator) -> StructuredAction:
    """Ground-truth next action with probability p_correct, else a schema-valid near miss"""
    if not 0.0 <= p_correct <= 1.0:
        raise UsageError("p_correct must lie in [0, 1]")
    target = task.target[ctx.cursor]
    if rng.random() < p_correct:
        return StructuredAction(tool=target.tool, args=dict(target.args), thought='cloud plan')
    spec = task.tool(target.tool)
    mutable = [(slot, domain) for slot, domain in spec.arg_slots if len(domain) > 1]
    if mutable:
        slot, domain = mutable[int(rng.integers(len(mutable)))]
        wrong = [value for value in domain if value != target.args[slot]]
        args = dict(target.args)
        args[slot] = wrong[int(rng.integers(len(wrong)))]
        return StructuredAction(tool=target.tool, args=args, thought='cloud plan')
    alternatives = [t for t in task.tools if t.name != target.tool]
    other = alternatives[int(rng.integers(len(alternatives)))]
    return StructuredAction(tool=other.name, args=other.canonical_args(), thought='cloud plan')


def validate_schema(action: StructuredAction, task: Task) -> bool:
    """Known tool, every declared slot present, values in domain, no extra slots"""
    spec = task.tool(action.tool)
    if spec is None:
        return False
    if set(action.args) != set(spec.slot_names):
        return False
    return all(action.args[slot] in domain for slot, domain in spec.arg_slots)


def evaluate_quality(action: StructuredAction, task: Task, step_index: int) -> float:
    """Frozen rubric: 1.0 exact match, 0.5 right tool with a wrong argument, else 0.0"""
    if not 0 <= step_index < len(task.target):
        raise UsageError(f"Step index {step_index} outside target of length {len(task.target)}")
    target = task.target[step_index]
    if action.tool != target.tool:
        return 0.0
    return 1.0 if action.args == target.args else 0.5


def summarize(action: StructuredAction) -> str:
    digest = ','.join(f'{k}={v}' for k, v in sorted(action.args.items())) or 'no args'
    return f'{action.tool} ok: {digest}'


def action_tokens(action: StructuredAction) -> int:
    """Generated tokens: one for the name, two per argument, one per thought word"""
    return 1 + 2 * len(action.args) + len(action.thought.split())


def update_context(ctx: Context, decision: str, tool_id: str, summary: Optional[str] = None) -> Context:
    """Edge appends the tool id; cloud appends (tool id, summary)"""
    if decision == EDGE:
        entry = ContextEntry(tool=tool_id)
    elif decision == CLOUD:
        summary = summary or ''
        truncated = len(summary) > SUMMARY_LIMIT
        if truncated:
            logger.warning("Summary for %s truncated from %d to %d characters", tool_id, len(summary), SUMMARY_LIMIT)
            summary = summary[:SUMMARY_LIMIT]
        entry = ContextEntry(tool=tool_id, summary=summary, truncated=truncated)
    else:
        raise UsageError(f"Unknown decision '{decision}'")
    return replace(ctx, entries=ctx.entries + (entry,), k=ctx.k + 1)


def sft_examples(tasks: Sequence[Task]) -> list[tuple[Task, Context, StructuredAction]]:
    """(task, context, target action) along each task's ground-truth path"""
    examples = []
    for task in tasks:
        ctx = initial_context(task)
        for action in task.target:
            examples.append((task, ctx, action))
            ctx = update_context(ctx, EDGE, action.tool).advanced()
    return examples
