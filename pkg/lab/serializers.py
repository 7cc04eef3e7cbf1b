import json

from django.conf import settings
from rest_framework import serializers

from agents.services.learning import PPOConfig, RMTrainConfig, SFTConfig
from lab.exceptions import UsageError
from lab.services.controllers import FuncDynParams, NormBounds
from lab.services.econ import CostParams, LatencyParams, TokenParams
from lab.services.net_model import MBIT, MS, REGIMES, DriftParams, KappaParams, Regime
from lab.services.sim import CONTROLLER_CHOICES, FIXED, CorpusSpec, RunConfig


class StrictSerializer(serializers.Serializer):
    """Rejects unknown keys and materializes missing nested sections with defaults"""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown key.'] for key in unknown})
            data = dict(data)
            for name, field in self.fields.items():
                if isinstance(field, serializers.Serializer) and name not in data:
                    data[name] = {}
        return super().to_internal_value(data)


def _pair(child, default=None):
    if default is None:
        return serializers.ListField(child=child, min_length=2, max_length=2)
    return serializers.ListField(child=child, min_length=2, max_length=2, default=default)


def _ordered_pair(value, label, strict=True):
    lo, hi = value
    if lo > hi or (strict and lo == hi):
        raise serializers.ValidationError({label: 'Expected [min, max] with min < max.'})


class ScheduleSegmentSerializer(StrictSerializer):
    regime = serializers.CharField()
    steps = serializers.IntegerField(min_value=1)


class RegimeSerializer(StrictSerializer):
    name = serializers.CharField()
    bw_mbps = _pair(serializers.FloatField(min_value=0))
    rtt_ms = _pair(serializers.FloatField(min_value=0))

    def validate(self, attrs):
        for label in ('bw_mbps', 'rtt_ms'):
            _ordered_pair(attrs[label], label, strict=False)
            if attrs[label][0] <= 0:
                raise serializers.ValidationError({label: 'Bounds must be positive.'})
        return attrs


class DriftSerializer(StrictSerializer):
    sigma_rtt_ms = serializers.FloatField(min_value=0, default=2.0)
    sigma_bw_mbps = serializers.FloatField(min_value=0, default=2.0)
    clamp = serializers.BooleanField(default=True)


def _default_schedule():
    return [{'regime': 'GOOD', 'steps': 200}, {'regime': 'MID', 'steps': 200}, {'regime': 'BAD', 'steps': 200}]


class TraceSerializer(StrictSerializer):
    schedule = ScheduleSegmentSerializer(many=True, default=_default_schedule)
    regimes = RegimeSerializer(many=True, default=list)
    drift = DriftSerializer()
    steps = serializers.IntegerField(min_value=1, default=600)
    # Trace CSV consumed by sim instead of generating one
    path = serializers.CharField(allow_null=True, default=None)

    def validate(self, attrs):
        if not attrs['schedule']:
            raise serializers.ValidationError({'schedule': 'Schedule must not be empty.'})
        known = set(REGIMES) | {r['name'] for r in attrs['regimes']}
        for segment in attrs['schedule']:
            if segment['regime'] not in known:
                raise serializers.ValidationError(
                    {'schedule': f"Unknown regime '{segment['regime']}' (known: {', '.join(sorted(known))})."})
        return attrs


class EconSerializer(StrictSerializer):
    edge_latency_s = serializers.FloatField(min_value=0, default=0.5)
    edge_latency_per_token_s = serializers.FloatField(min_value=0, default=0.0)
    cloud_compute_s = serializers.FloatField(min_value=0, default=0.6)
    payload_bytes = serializers.FloatField(min_value=0, default=3_000_000)
    alpha = serializers.FloatField(min_value=0, default=0.01)
    c_tok = serializers.FloatField(min_value=0, default=2e-6)
    # lambda is a keyword; keep the external name
    lam = serializers.FloatField(source='lambda', default=10.0)
    token_base = serializers.IntegerField(min_value=0, default=400)
    token_per_step = serializers.IntegerField(min_value=0, default=100)
    p_correct = serializers.FloatField(min_value=0, max_value=1, default=0.98)

    def to_internal_value(self, data):
        if isinstance(data, dict) and 'lambda' in data:
            data = dict(data)
            data['lam'] = data.pop('lambda')
        return super().to_internal_value(data)

    def validate(self, attrs):
        if not attrs['lambda'] > 0:
            raise serializers.ValidationError({'lambda': 'Must be strictly positive.'})
        return attrs


class KappaSerializer(StrictSerializer):
    rtt_ref_ms = serializers.FloatField(default=60.0)
    bw_ref_mbps = serializers.FloatField(default=55.0)
    c_ref = serializers.FloatField(default=2e-6)
    exp_rtt = serializers.FloatField(min_value=0, default=1.0)
    exp_bw = serializers.FloatField(min_value=0, default=1.0)
    exp_price = serializers.FloatField(min_value=0, default=1.0)
    price = serializers.FloatField(default=2e-6)

    def validate(self, attrs):
        for key in ('rtt_ref_ms', 'bw_ref_mbps', 'c_ref', 'price'):
            if not attrs[key] > 0:
                raise serializers.ValidationError({key: 'Must be strictly positive.'})
        return attrs


class GridSerializer(StrictSerializer):
    lo = serializers.FloatField(allow_null=True, default=None)
    hi = serializers.FloatField(allow_null=True, default=None)
    nodes = serializers.IntegerField(min_value=1, default=64)


class TheoryGridSerializer(GridSerializer):
    lo = serializers.FloatField(default=-6.0)
    hi = serializers.FloatField(default=12.0)
    nodes = serializers.IntegerField(min_value=2, default=4096)


class TheorySerializer(StrictSerializer):
    lambdas = serializers.ListField(child=serializers.FloatField(), default=lambda: [10.0])
    kappas = serializers.ListField(child=serializers.FloatField(), default=lambda: [0.5, 1.0, 2.0, 4.0])
    tau_grid = TheoryGridSerializer()
    frontier_nodes = serializers.IntegerField(min_value=2, default=181)
    node_count = serializers.IntegerField(min_value=64, default=512)
    tol = serializers.FloatField(default=1e-10)
    lemma_points = serializers.IntegerField(min_value=1, default=20)
    regimes = serializers.ListField(child=serializers.CharField(), default=lambda: ['GOOD', 'MID', 'BAD'])


class CorpusSerializer(StrictSerializer):
    size = serializers.IntegerField(min_value=1, default=2000)
    tool_range = _pair(serializers.IntegerField(min_value=1), lambda: [10, 20])
    target_len_range = _pair(serializers.IntegerField(min_value=1), lambda: [1, 8])
    prior_range = _pair(serializers.IntegerField(min_value=0), lambda: [0, 8])
    canonical_prob = serializers.FloatField(min_value=0, max_value=1, default=0.8)
    # Corpus JSONL consumed instead of generating one
    path = serializers.CharField(allow_null=True, default=None)

    def validate(self, attrs):
        for label in ('tool_range', 'target_len_range', 'prior_range'):
            _ordered_pair(attrs[label], label, strict=False)
        return attrs


class FuncDynSerializer(StrictSerializer):
    tau0 = serializers.FloatField(default=4.0)
    a_rtt = serializers.FloatField(min_value=0, default=1.0)
    b_bw = serializers.FloatField(min_value=0, default=0.5)
    g_hist = serializers.FloatField(min_value=0, default=0.5)


class NormSerializer(StrictSerializer):
    rtt_ms = _pair(serializers.FloatField(), lambda: [20.0, 130.0])
    bw_mbps = _pair(serializers.FloatField(), lambda: [5.0, 200.0])
    score = _pair(serializers.FloatField(), lambda: [-5.0, 5.0])

    def validate(self, attrs):
        for label in ('rtt_ms', 'bw_mbps', 'score'):
            _ordered_pair(attrs[label], label)
        return attrs


class PolicyNetSerializer(StrictSerializer):
    widths = serializers.ListField(child=serializers.IntegerField(min_value=1), default=lambda: [4, 50, 50, 1])
    activation = serializers.ChoiceField(choices=['tanh', 'sigmoid'], default='tanh')
    checkpoint = serializers.CharField(allow_null=True, default=None)

    def validate_widths(self, value):
        if len(value) < 2 or value[0] != 4 or value[-1] != 1:
            raise serializers.ValidationError('Widths must start at 4 inputs and end at 1 output.')
        return value


class ControllerSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=CONTROLLER_CHOICES, default=FIXED)
    tau = serializers.FloatField(allow_null=True, default=None)
    funcdyn = FuncDynSerializer()
    norm = NormSerializer()
    policynet = PolicyNetSerializer()
    recalibrate = serializers.BooleanField(default=True)


class SFTSerializer(StrictSerializer):
    lr = serializers.FloatField(min_value=0, default=0.5)
    epochs = serializers.IntegerField(min_value=1, default=2)
    batch = serializers.IntegerField(min_value=1, default=16)
    tasks = serializers.IntegerField(min_value=1, default=300)


class RMSerializer(StrictSerializer):
    lr = serializers.FloatField(min_value=0, default=0.5)
    epochs = serializers.IntegerField(min_value=1, default=200)
    val_fraction = serializers.FloatField(min_value=0, max_value=0.9, default=0.2)
    patience = serializers.IntegerField(min_value=1, default=3)
    margin = serializers.FloatField(min_value=0, default=1.0)
    init_pairs = serializers.IntegerField(min_value=1, default=2000)


class PPOSerializer(StrictSerializer):
    clip_eps = serializers.FloatField(default=0.2)
    kl_beta = serializers.FloatField(min_value=0, default=0.05)
    gamma = serializers.FloatField(default=0.99)
    lr = serializers.FloatField(min_value=0, default=0.01)
    epochs = serializers.IntegerField(min_value=1, default=4)
    batch_size = serializers.IntegerField(min_value=1, default=256)
    updates_per_window = serializers.IntegerField(min_value=1, default=4)
    anchor = serializers.BooleanField(default=True)
    anchor_period = serializers.IntegerField(min_value=1, default=10)
    anchor_lr = serializers.FloatField(min_value=0, default=0.5)
    anchor_steps = serializers.IntegerField(min_value=1, default=1)
    anchor_tasks = serializers.IntegerField(min_value=1, default=64)
    anchor_weight = serializers.FloatField(min_value=0, default=0.1)

    def validate(self, attrs):
        if not 0 < attrs['clip_eps'] < 1:
            raise serializers.ValidationError({'clip_eps': 'Must lie in (0, 1).'})
        if not 0 < attrs['gamma'] <= 1:
            raise serializers.ValidationError({'gamma': 'Must lie in (0, 1].'})
        return attrs


class NearThresholdSerializer(StrictSerializer):
    fraction = serializers.FloatField(min_value=0, max_value=1, default=0.05)
    band_scale = serializers.FloatField(min_value=0, default=0.25)


class LearningSerializer(StrictSerializer):
    enabled = serializers.BooleanField(default=False)
    idle_period = serializers.IntegerField(min_value=1, default=64)
    cache_capacity = serializers.IntegerField(min_value=1, default=10_000)
    sft = SFTSerializer()
    rm = RMSerializer()
    ppo = PPOSerializer()
    near_threshold = NearThresholdSerializer()


class SimSerializer(StrictSerializer):
    ewma_beta = serializers.FloatField(default=0.2)
    q_hat_init = serializers.FloatField(min_value=0, max_value=1, default=0.5)
    step_cap = serializers.IntegerField(min_value=1, default=12)
    counterfactual = serializers.BooleanField(default=False)
    calibration_tasks = serializers.IntegerField(min_value=1, default=200)
    # Extra controllers run on the same corpus, trace and seed
    compare = serializers.ListField(child=serializers.ChoiceField(choices=CONTROLLER_CHOICES), default=list)
    # Seeds for a paired comparison of controller.kind against compare[0]
    paired_seeds = serializers.ListField(child=serializers.IntegerField(min_value=0), default=list)

    def validate_ewma_beta(self, value):
        if not 0 < value <= 1:
            raise serializers.ValidationError('Must lie in (0, 1].')
        return value


class ScanSerializer(StrictSerializer):
    enabled = serializers.BooleanField(default=False)
    lambdas = serializers.ListField(child=serializers.FloatField(), default=lambda: [8.0, 10.0, 12.0])
    tau_grid = GridSerializer()
    regimes = serializers.ListField(child=serializers.CharField(), default=list)
    regime_lambda = serializers.FloatField(default=10.0)
    # Best operating point per lambda for the SFT and the post-PPO edge policy
    ppo_frontier = serializers.BooleanField(default=False)


class PolicyNetTrainSerializer(StrictSerializer):
    # Dataset CSV; None builds one from a calibration run
    dataset = serializers.CharField(allow_null=True, default=None)
    lr = serializers.FloatField(min_value=0, default=0.05)
    epochs = serializers.IntegerField(min_value=1, default=200)
    batch = serializers.IntegerField(min_value=1, default=32)


class ExperimentConfigSerializer(StrictSerializer):
    """Effective configuration of a run; every section is optional"""
    trace = TraceSerializer()
    econ = EconSerializer()
    kappa = KappaSerializer()
    theory = TheorySerializer()
    corpus = CorpusSerializer()
    controller = ControllerSerializer()
    learning = LearningSerializer()
    sim = SimSerializer()
    scan = ScanSerializer()
    policynet_train = PolicyNetTrainSerializer()
    seed = serializers.IntegerField(min_value=0, default=lambda: settings.ROUTELAB['DEFAULT_SEED'])
    output_dir = serializers.CharField(default=lambda: settings.ROUTELAB['OUTPUT_DIR'])


def apply_override(config: dict, assignment: str) -> dict:
    """Apply one `dotted.key=JSON` override; bare words are taken as strings"""
    if '=' not in assignment:
        raise UsageError(f"Override '{assignment}' must look like dotted.key=value")
    key, raw = assignment.split('=', 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.strip().split('.')
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise UsageError(f"Override '{key}' descends into a non-section value")
        node = child
    node[parts[-1]] = value
    return config


def custom_regimes(data: dict) -> dict:
    return {
        r['name']: Regime.from_units(r['name'], tuple(r['bw_mbps']), tuple(r['rtt_ms']))
        for r in data['trace']['regimes']
    }


def drift_params(data: dict) -> DriftParams:
    drift = data['trace']['drift']
    return DriftParams(
        sigma_rtt=drift['sigma_rtt_ms'] * MS,
        sigma_bw=drift['sigma_bw_mbps'] * MBIT,
        clamp=drift['clamp'],
    )


def kappa_params(data: dict) -> KappaParams:
    k = data['kappa']
    return KappaParams(
        rtt_ref=k['rtt_ref_ms'] * MS,
        bw_ref=k['bw_ref_mbps'] * MBIT,
        c_ref=k['c_ref'],
        exp_rtt=k['exp_rtt'],
        exp_bw=k['exp_bw'],
        exp_price=k['exp_price'],
    )


def norm_bounds(data: dict) -> NormBounds:
    norm = data['controller']['norm']
    return NormBounds(
        rtt=(norm['rtt_ms'][0] * MS, norm['rtt_ms'][1] * MS),
        bw=(norm['bw_mbps'][0] * MBIT, norm['bw_mbps'][1] * MBIT),
        score=tuple(norm['score']),
    )


def run_config(data: dict, **overrides) -> RunConfig:
    """Service-level RunConfig from a validated ExperimentConfig"""
    econ = data['econ']
    corpus = data['corpus']
    controller = data['controller']
    learning = data['learning']
    sim = data['sim']
    rm = learning['rm']
    ppo = learning['ppo']
    sft = learning['sft']
    kwargs = dict(
        controller=controller['kind'],
        corpus=CorpusSpec(
            size=corpus['size'],
            tool_range=tuple(corpus['tool_range']),
            target_len_range=tuple(corpus['target_len_range']),
            prior_range=tuple(corpus['prior_range']),
            canonical_prob=corpus['canonical_prob'],
        ),
        schedule=tuple((s['regime'], s['steps']) for s in data['trace']['schedule']),
        regimes=custom_regimes(data),
        drift=drift_params(data),
        latency=LatencyParams(
            edge_latency=econ['edge_latency_s'],
            edge_latency_per_token=econ['edge_latency_per_token_s'],
            cloud_compute=econ['cloud_compute_s'],
            payload_bytes=econ['payload_bytes'],
        ),
        costs=CostParams(alpha=econ['alpha'], c_tok=econ['c_tok'], lam=econ['lambda']),
        tokens=TokenParams(base=econ['token_base'], per_step=econ['token_per_step']),
        tau=controller['tau'],
        funcdyn=FuncDynParams(norm=norm_bounds(data), **controller['funcdyn']),
        policynet_widths=tuple(controller['policynet']['widths']),
        policynet_activation=controller['policynet']['activation'],
        policynet_lr=data['policynet_train']['lr'],
        policynet_epochs=data['policynet_train']['epochs'],
        policynet_batch=data['policynet_train']['batch'],
        p_correct=econ['p_correct'],
        learning=learning['enabled'],
        counterfactual=sim['counterfactual'],
        recalibrate=controller['recalibrate'],
        idle_period=learning['idle_period'],
        beta=sim['ewma_beta'],
        q_hat_init=sim['q_hat_init'],
        step_cap=sim['step_cap'],
        near_threshold_fraction=learning['near_threshold']['fraction'],
        band_scale=learning['near_threshold']['band_scale'],
        cache_capacity=learning['cache_capacity'],
        sft_tasks=sft['tasks'],
        calibration_tasks=sim['calibration_tasks'],
        rm_init_pairs=rm['init_pairs'],
        ppo=PPOConfig(**ppo),
        rm=RMTrainConfig(
            lr=rm['lr'], epochs=rm['epochs'], val_fraction=rm['val_fraction'],
            patience=rm['patience'], schema_margin=rm['margin'],
        ),
        sft=SFTConfig(lr=sft['lr'], epochs=sft['epochs'], batch=sft['batch']),
        seed=data['seed'],
    )
    kwargs.update(overrides)
    return RunConfig(**kwargs)
