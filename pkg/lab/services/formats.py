"""
Readers and writers for every file the lab produces or consumes.

Floats are written with 9 significant digits, traces with fixed 6 decimals.
"""
import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

from django.conf import settings

from agents.services.learning import CachedTuple, UpdateDiagnostics
from agents.services.toyworld import Task
from lab.exceptions import UsageError
from lab.services.controllers import PolicyNet
from lab.services.net_model import MBIT, MS, NetworkState, TraceStep
from lab.services.sim import MetricsSummary, ScanRow, StepRecord
from lab.services.theory import FrontierPoint

TRACE_HEADER = ['step', 'regime', 'rtt_ms', 'bw_mbps']
FRONTIER_HEADER = ['tau', 'q', 'c', 'j', 'kappa', 'lambda']
STEP_LOG_HEADER = [
    'task', 'step', 'score', 'threshold', 'decision', 'rtt_ms', 'bw_mbps',
    'latency_s', 'cost', 'quality', 'schema_ok', 'cloud_better', 'regime', 'q_hat',
]
DIAGNOSTICS_HEADER = ['update', 'mean_reward', 'kl', 'clip_frac', 'schema_rate', 'composite', 'anchored', 'task']
TAU0_HEADER = ['score', 'j_edge', 'j_cloud']
POLICYNET_DATASET_HEADER = ['rtt_norm', 'bw_norm', 's_norm', 'q_hat', 'label']
RISK_COVERAGE_HEADER = ['tau', 'coverage', 'selective_risk']
SCAN_HEADER = ['lambda', 'tau', 'q', 'c', 'j']


def fmt(value: float) -> str:
    return f'{value:.{settings.ROUTELAB["FLOAT_DIGITS"]}g}'


def fmt_bool(value) -> str:
    if value is None:
        return ''
    return 'true' if value else 'false'


def parse_bool(text: str):
    text = text.strip().lower()
    if text == '':
        return None
    if text in ('true', '1'):
        return True
    if text in ('false', '0'):
        return False
    raise UsageError(f"Not a boolean: '{text}'")


def rounded(value):
    """Floats nested in dicts and lists cut to FLOAT_DIGITS significant digits"""
    if isinstance(value, bool):
        return value
    if isinstance(value, float):
        return float(fmt(value))
    if isinstance(value, dict):
        return {key: rounded(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [rounded(item) for item in value]
    return value


def number(row: dict, name: str, path: Path, cast=float):
    try:
        return cast(row[name])
    except (TypeError, ValueError):
        raise UsageError(f"{path}: malformed {name} value '{row[name]}'") from None


def _ensure_parent(path: Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]):
    _ensure_parent(path)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: Path, required: Sequence[str]) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"File not found: {path}")
    with open(path, newline='') as handle:
        reader = csv.DictReader(handle)
        missing = [name for name in required if name not in (reader.fieldnames or [])]
        if missing:
            raise UsageError(f"{path} lacks column(s): {', '.join(missing)}")
        return list(reader)


def write_json(path: Path, payload):
    _ensure_parent(path)
    with open(path, 'w') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write('\n')


def read_json(path: Path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"File not found: {path}")
    with open(path) as handle:
        try:
            return json.load(handle)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path} is not valid JSON: {exc}") from exc


def write_trace(path: Path, trace: Sequence[TraceStep]):
    decimals = settings.ROUTELAB['TRACE_DECIMALS']
    write_csv(path, TRACE_HEADER, (
        [str(i), step.regime, f'{step.state.rtt_ms:.{decimals}f}', f'{step.state.bw_mbps:.{decimals}f}']
        for i, step in enumerate(trace)
    ))


def read_trace(path: Path) -> list[TraceStep]:
    rows = read_csv(path, TRACE_HEADER)
    return [
        TraceStep(row['regime'], NetworkState(
            rtt=number(row, 'rtt_ms', path) * MS, bw=number(row, 'bw_mbps', path) * MBIT))
        for row in rows
    ]


def write_frontier(path: Path, rows: Iterable[tuple[FrontierPoint, float, float]]):
    """Rows of (point, kappa, lambda)"""
    write_csv(path, FRONTIER_HEADER, (
        [fmt(p.tau), fmt(p.q), fmt(p.c), fmt(p.j), fmt(kappa), fmt(lam)] for p, kappa, lam in rows
    ))


def write_corpus(path: Path, tasks: Iterable[Task]):
    _ensure_parent(path)
    with open(path, 'w') as handle:
        for task in tasks:
            # Slot order matters; keep insertion order
            handle.write(json.dumps(task.to_record()) + '\n')


def read_corpus(path: Path) -> list[Task]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"Corpus not found: {path}")
    tasks = []
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                tasks.append(Task.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise UsageError(f"{path}:{line_no}: malformed task record ({exc})") from exc
    if not tasks:
        raise UsageError(f"Corpus {path} is empty")
    return tasks


def write_step_log(path: Path, records: Iterable[StepRecord]):
    write_csv(path, STEP_LOG_HEADER, (
        [r.task, str(r.step), fmt(r.score), fmt(r.threshold), r.decision, fmt(r.rtt_ms), fmt(r.bw_mbps),
         fmt(r.latency_s), fmt(r.cost), fmt(r.quality), fmt_bool(r.schema_ok), fmt_bool(r.cloud_better),
         r.regime, fmt(r.q_hat)]
        for r in records
    ))


def read_risk_records(path: Path) -> list[tuple[float, bool]]:
    """(score, cloud_better) pairs from a step log written with counterfactuals on"""
    rows = read_csv(path, ['score', 'cloud_better'])
    if not rows:
        raise UsageError(f"Step log {path} has no rows")
    records = []
    for row in rows:
        flag = parse_bool(row['cloud_better'])
        if flag is None:
            raise UsageError(
                f"Step log {path} has no counterfactual flags; rerun sim with sim.counterfactual=true")
        records.append((number(row, 'score', path), flag))
    return records


def write_diagnostics(path: Path, rows: Iterable[UpdateDiagnostics]):
    write_csv(path, DIAGNOSTICS_HEADER, (
        [str(d.update), fmt(d.mean_reward), fmt(d.kl), fmt(d.clip_frac), fmt(d.schema_rate),
         fmt(d.composite), fmt_bool(d.anchored), str(d.task)]
        for d in rows
    ))


def write_metrics(path: Path, summary: MetricsSummary, extra: dict = None):
    payload = summary.to_record()
    payload.update(extra or {})
    write_json(path, rounded(payload))


def write_cache(path: Path, items: Iterable[CachedTuple]):
    _ensure_parent(path)
    with open(path, 'w') as handle:
        for item in items:
            handle.write(json.dumps(item.to_record(), sort_keys=True) + '\n')


def write_tau0_records(path: Path, records: Iterable[StepRecord]):
    write_csv(path, TAU0_HEADER, (
        [fmt(r.score), fmt(r.counterfactual.j_edge), fmt(r.counterfactual.j_cloud)] for r in records
    ))


def read_tau0_records(path: Path) -> list[tuple[float, float, float]]:
    rows = read_csv(path, TAU0_HEADER)
    return [tuple(number(r, name, path) for name in TAU0_HEADER) for r in rows]


def write_policynet_dataset(path: Path, features, labels):
    write_csv(path, POLICYNET_DATASET_HEADER, (
        [fmt(x[0]), fmt(x[1]), fmt(x[2]), fmt(x[3]), str(int(y))] for x, y in zip(features, labels)
    ))


def read_policynet_dataset(path: Path):
    rows = read_csv(path, POLICYNET_DATASET_HEADER)
    features = [[number(r, name, path) for name in POLICYNET_DATASET_HEADER[:4]] for r in rows]
    labels = [number(r, 'label', path, int) for r in rows]
    return features, labels


def write_risk_coverage(path: Path, curve):
    write_csv(path, RISK_COVERAGE_HEADER, (
        [fmt(p.tau), fmt(p.coverage), fmt(p.selective_risk)] for p in curve
    ))


def write_scan(path: Path, rows: Iterable[ScanRow]):
    write_csv(path, SCAN_HEADER, ([fmt(r.lam), fmt(r.tau), fmt(r.q), fmt(r.c), fmt(r.j)] for r in rows))


def save_checkpoint(net: PolicyNet, path: Path):
    write_json(path, net.to_checkpoint())


def load_checkpoint(path: Path) -> PolicyNet:
    return PolicyNet.from_checkpoint(read_json(path))
