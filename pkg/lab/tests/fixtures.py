from agents.services.learning import PPOConfig, RMTrainConfig
from agents.services.toyworld import DEFAULT_CATALOG, FINISH, StructuredAction, Task
from lab.services.sim import CorpusSpec, RunConfig


def small_config(**overrides) -> RunConfig:
    """A RunConfig small enough for unit tests"""
    values = dict(
        corpus=CorpusSpec(size=8, target_len_range=(1, 3), prior_range=(0, 2)),
        sft_tasks=30,
        calibration_tasks=12,
        rm_init_pairs=80,
        rm=RMTrainConfig(epochs=30),
        ppo=PPOConfig(batch_size=32, updates_per_window=1, epochs=1, anchor_tasks=8),
        idle_period=4,
        policynet_widths=(4, 8, 1),
        policynet_epochs=5,
        seed=3,
    )
    values.update(overrides)
    return RunConfig(**values)


def workflow_task(target, extra=('verify_path',), task_id='fixture'):
    names = {action.tool for action in target} | set(extra) | {FINISH}
    return Task(
        id=task_id,
        query='fixture task',
        tools=tuple(DEFAULT_CATALOG.spec(n) for n in sorted(names, key=DEFAULT_CATALOG.index.get)),
        target=tuple(target),
        prior_steps=(),
        anchor='simulate_topology',
    )


def three_step_task():
    return workflow_task([
        StructuredAction('measure_rtt', {'target': 'edge'}),
        StructuredAction('measure_bandwidth', {'direction': 'down'}),
        StructuredAction(FINISH),
    ])
