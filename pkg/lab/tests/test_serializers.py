from django.conf import settings
from django.test import SimpleTestCase

from lab.exceptions import UsageError
from lab.serializers import (
    ExperimentConfigSerializer,
    apply_override,
    custom_regimes,
    drift_params,
    run_config,
)
from lab.services.net_model import MBIT, MS


def validate(data):
    serializer = ExperimentConfigSerializer(data=data)
    return serializer.is_valid(), serializer


class ExperimentConfigSerializerTests(SimpleTestCase):

    def test_empty_config_takes_defaults(self):
        valid, serializer = validate({})
        self.assertTrue(valid, serializer.errors)
        data = serializer.validated_data
        self.assertEqual(data['econ']['lambda'], 10.0)
        self.assertEqual(data['seed'], settings.ROUTELAB['DEFAULT_SEED'])
        self.assertEqual([s['regime'] for s in data['trace']['schedule']], ['GOOD', 'MID', 'BAD'])
        self.assertEqual(data['theory']['kappas'], [0.5, 1.0, 2.0, 4.0])
        self.assertEqual(data['learning']['ppo']['anchor_period'], 10)
        self.assertEqual(data['controller']['kind'], 'fixed')

    def test_unknown_keys_are_rejected(self):
        valid, serializer = validate({'bogus': 1})
        self.assertFalse(valid)
        self.assertIn('bogus', serializer.errors)
        valid, serializer = validate({'econ': {'lamda': 3}})
        self.assertFalse(valid)
        self.assertIn('econ', serializer.errors)

    def test_lambda_must_be_positive(self):
        valid, serializer = validate({'econ': {'lambda': 0}})
        self.assertFalse(valid)
        self.assertIn('econ', serializer.errors)
        valid, serializer = validate({'econ': {'lambda': 12}})
        self.assertTrue(valid, serializer.errors)
        self.assertEqual(serializer.validated_data['econ']['lambda'], 12.0)

    def test_unknown_regime_in_schedule(self):
        valid, serializer = validate({'trace': {'schedule': [{'regime': 'AWFUL', 'steps': 10}]}})
        self.assertFalse(valid)
        self.assertIn('trace', serializer.errors)

    def test_custom_regime(self):
        valid, serializer = validate({'trace': {
            'regimes': [{'name': 'SAT', 'bw_mbps': [1, 2], 'rtt_ms': [500, 700]}],
            'schedule': [{'regime': 'SAT', 'steps': 5}],
        }})
        self.assertTrue(valid, serializer.errors)
        regime = custom_regimes(serializer.validated_data)['SAT']
        self.assertEqual(regime.rtt_range, (500 * MS, 700 * MS))
        self.assertEqual(regime.bw_range, (1 * MBIT, 2 * MBIT))

    def test_inverted_ranges(self):
        valid, _ = validate({'corpus': {'tool_range': [12, 10]}})
        self.assertFalse(valid)
        valid, _ = validate({'controller': {'norm': {'score': [1, 1]}}})
        self.assertFalse(valid)
        valid, _ = validate({'controller': {'policynet': {'widths': [3, 10, 1]}}})
        self.assertFalse(valid)


class OverrideTests(SimpleTestCase):

    def test_nested_assignment(self):
        config = apply_override({}, 'econ.lambda=12')
        apply_override(config, 'controller.kind=all-edge')
        apply_override(config, 'scan.lambdas=[8, 12]')
        self.assertEqual(config, {
            'econ': {'lambda': 12},
            'controller': {'kind': 'all-edge'},
            'scan': {'lambdas': [8, 12]},
        })

    def test_malformed_overrides(self):
        with self.assertRaises(UsageError):
            apply_override({}, 'econ.lambda')
        with self.assertRaises(UsageError):
            apply_override({'seed': 3}, 'seed.value=1')


class RunConfigTests(SimpleTestCase):

    def test_run_config_carries_the_sections(self):
        valid, serializer = validate({
            'econ': {'lambda': 12, 'p_correct': 1.0},
            'trace': {'drift': {'sigma_rtt_ms': 0, 'clamp': False}},
            'learning': {'enabled': True, 'idle_period': 16, 'ppo': {'clip_eps': 0.1}, 'rm': {'margin': 0.5}},
            'controller': {'kind': 'funcdyn', 'funcdyn': {'a_rtt': 2.0}},
            'seed': 9,
        })
        self.assertTrue(valid, serializer.errors)
        data = serializer.validated_data
        config = run_config(data)
        self.assertEqual(config.costs.lam, 12.0)
        self.assertEqual(config.p_correct, 1.0)
        self.assertTrue(config.learning)
        self.assertEqual(config.idle_period, 16)
        self.assertEqual(config.ppo.clip_eps, 0.1)
        self.assertEqual(config.rm.schema_margin, 0.5)
        self.assertEqual(config.controller, 'funcdyn')
        self.assertEqual(config.funcdyn.a_rtt, 2.0)
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.schedule, (('GOOD', 200), ('MID', 200), ('BAD', 200)))
        drift = drift_params(data)
        self.assertEqual(drift.sigma_rtt, 0.0)
        self.assertFalse(drift.clamp)
        self.assertEqual(run_config(data, seed=4).seed, 4)
