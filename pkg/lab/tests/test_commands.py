import csv
import io
import json
import math
import tempfile
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase

from lab.models import ExperimentRun

SMALL_SIM = [
    'controller.kind=all-edge',
    'corpus.size=4',
    'learning.sft.tasks=10',
    'learning.rm.init_pairs=20',
    'learning.rm.epochs=5',
    'sim.calibration_tasks=4',
]


class CommandTestCase(TestCase):

    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.dir = Path(tmp.name)

    def call(self, name, *args, **options):
        options.setdefault('out', str(self.dir))
        self.stdout = io.StringIO()
        return call_command(name, *args, stdout=self.stdout, stderr=io.StringIO(), **options)

    def assertExitCode(self, code, name, *args, **options):
        with self.assertRaises(CommandError) as ctx:
            self.call(name, *args, **options)
        self.assertEqual(ctx.exception.returncode, code)

    def rows(self, filename):
        with open(self.dir / filename, newline='') as handle:
            return list(csv.DictReader(handle))


class TraceCommandTests(CommandTestCase):

    def test_writes_requested_steps(self):
        self.call('trace', steps=10)
        lines = (self.dir / 'trace.csv').read_text().splitlines()
        self.assertEqual(len(lines), 11)
        self.assertEqual(lines[0], 'step,regime,rtt_ms,bw_mbps')
        self.assertTrue((self.dir / 'effective_config.json').exists())
        run = ExperimentRun.objects.get(command='trace')
        self.assertEqual(run.status, 'completed')
        self.assertEqual(run.summary, {'steps': 10})

    def test_seed_is_reproducible(self):
        self.call('trace', steps=20, seed=4)
        first = (self.dir / 'trace.csv').read_text()
        self.call('trace', steps=20, seed=4)
        self.assertEqual((self.dir / 'trace.csv').read_text(), first)

    def test_unknown_regime_is_a_usage_error(self):
        self.assertExitCode(2, 'trace', overrides=['trace.schedule=[{"regime": "AWFUL", "steps": 5}]'])
        self.assertFalse(ExperimentRun.objects.exists())

    def test_malformed_override(self):
        self.assertExitCode(2, 'trace', overrides=['bogus'])
        self.assertExitCode(2, 'trace', overrides=['bogus=1'])

    def test_config_file(self):
        config = self.dir / 'config.json'
        config.write_text(json.dumps({'trace': {'schedule': [{'regime': 'BAD', 'steps': 5}], 'steps': 5}}))
        self.call('trace', config=str(config))
        self.assertEqual({row['regime'] for row in self.rows('trace.csv')}, {'BAD'})
        self.assertExitCode(2, 'trace', config=str(self.dir / 'absent.json'))


class CorpusCommandTests(CommandTestCase):

    def test_writes_tasks(self):
        self.call('corpus', overrides=['corpus.size=5'])
        lines = (self.dir / 'corpus.jsonl').read_text().splitlines()
        self.assertEqual(len(lines), 5)
        self.assertIn('available_tools', json.loads(lines[0]))


class TheoryCommandTests(CommandTestCase):

    def test_small_grid(self):
        self.call('theory', overrides=[
            'theory.kappas=[1, 2]',
            'theory.tau_grid.nodes=1024',
            'theory.lemma_points=3',
            'theory.regimes=["GOOD"]',
        ])
        cells = {float(row['kappa']): row for row in self.rows('tau_star.csv')}
        self.assertAlmostEqual(float(cells[1.0]['tau_star']), math.log(10), places=6)
        self.assertAlmostEqual(float(cells[2.0]['tau_star']), math.log(5), places=6)
        self.assertEqual(cells[1.0]['status'], 'ok')
        self.assertTrue((self.dir / 'frontier_GOOD.csv').exists())
        self.assertEqual(len(self.rows('frontier.csv')), 2 * 181)
        verification = json.loads((self.dir / 'verification.json').read_text())
        solver_checks = [c for c in verification['checks'] if c['name'] in ('closed_form', 'solver_vs_brute')]
        self.assertEqual(len(solver_checks), 4)
        self.assertTrue(all(c['passed'] for c in solver_checks), solver_checks)
        self.assertIn('PASS closed_form', self.stdout.getvalue())

    def test_empty_grids_are_usage_errors(self):
        self.assertExitCode(2, 'theory', overrides=['theory.lambdas=[]'])
        self.assertExitCode(2, 'theory', overrides=['theory.kappas=[]'])


class RiskCoverageCommandTests(CommandTestCase):

    def write_log(self, name, rows):
        path = self.dir / name
        path.write_text('score,cloud_better\n' + ''.join(f'{s},{f}\n' for s, f in rows))
        return str(path)

    def test_curve(self):
        log = self.write_log('steps.csv', [(1, 'true'), (2, 'false'), (3, 'true'), (4, 'false')])
        self.call('riskcov', log)
        rows = self.rows('riskcov.csv')
        self.assertEqual(len(rows), 101)
        self.assertAlmostEqual(float(rows[50]['tau']), 2.5)
        self.assertEqual(float(rows[50]['coverage']), 0.5)
        self.assertEqual(float(rows[50]['selective_risk']), 0.5)

    def test_compare(self):
        log = self.write_log('steps.csv', [(1, 'true'), (2, 'false'), (3, 'true'), (4, 'false')])
        better = self.write_log('better.csv', [(1, 'false'), (2, 'false'), (3, 'false'), (4, 'false')])
        self.call('riskcov', log, compare=better)
        dominance = json.loads((self.dir / 'riskcov_dominance.json').read_text())
        self.assertEqual(dominance, {'share': 1.0, 'passed': True})

    def test_logs_without_flags(self):
        self.assertExitCode(2, 'riskcov', self.write_log('no_flags.csv', [(1, '')]))
        self.assertExitCode(2, 'riskcov', self.write_log('empty.csv', []))
        self.assertExitCode(2, 'riskcov', str(self.dir / 'absent.csv'))


class Tau0CommandTests(CommandTestCase):

    def test_from_records(self):
        records = self.dir / 'records.csv'
        records.write_text('score,j_edge,j_cloud\n1,0,1\n2,1,0\n3,1,0\n')
        self.call('tau0', records=str(records))
        payload = json.loads((self.dir / 'tau0.json').read_text())
        self.assertEqual(payload, {'tau0': 1.5, 'records': 3, 'utility': 3.0})

    def test_malformed_records_exit_with_usage_code(self):
        records = self.dir / 'records.csv'
        records.write_text('score,j_edge,j_cloud\n1,zero,1\n')
        self.assertExitCode(2, 'tau0', records=str(records))


class TrainPolicyNetCommandTests(CommandTestCase):

    def test_from_dataset(self):
        dataset = self.dir / 'dataset.csv'
        rows = ['rtt_norm,bw_norm,s_norm,q_hat,label']
        rows += [f'0.5,0.5,{s / 10},0.5,{int(s >= 5)}' for s in range(10)]
        dataset.write_text('\n'.join(rows) + '\n')
        self.call('train_policynet', dataset=str(dataset), overrides=[
            'controller.policynet.widths=[4, 6, 1]', 'policynet_train.epochs=20'])
        checkpoint = json.loads((self.dir / 'policynet.json').read_text())
        self.assertEqual(checkpoint['widths'], [4, 6, 1])
        self.assertEqual(len(self.rows('losses.csv')), 20)
        self.assertEqual(ExperimentRun.objects.get(command='train_policynet').summary['rows'], 10)


class SimCommandTests(CommandTestCase):

    def test_all_edge_run(self):
        self.call('sim', overrides=SMALL_SIM)
        metrics = json.loads((self.dir / 'metrics.json').read_text())
        self.assertEqual(metrics['tasks'], 4)
        self.assertEqual(metrics['offload_rate'], 0.0)
        self.assertEqual(metrics['controller'], 'all-edge')
        steps = self.rows('steps.csv')
        self.assertEqual(len(steps), metrics['steps'])
        self.assertEqual({row['decision'] for row in steps}, {'edge'})
        run = ExperimentRun.objects.get(command='sim')
        self.assertEqual(run.config['corpus']['size'], 4)
        self.assertEqual(run.summary['tasks'], 4)

    def test_counterfactual_log_feeds_riskcov(self):
        self.call('sim', overrides=SMALL_SIM + ['sim.counterfactual=true'])
        self.assertEqual(len(self.rows('tau0_records.csv')), len(self.rows('steps.csv')))
        self.call('riskcov', str(self.dir / 'steps.csv'))
        self.assertEqual(len(self.rows('riskcov.csv')), 101)
        self.assertEqual(ExperimentRun.objects.count(), 2)

    def test_missing_corpus_file(self):
        self.assertExitCode(2, 'sim', overrides=SMALL_SIM + [f'corpus.path={self.dir / "absent.jsonl"}'])

    def test_learning_run_compares_reward_models_on_held_out_steps(self):
        self.call('sim', overrides=SMALL_SIM + [
            'learning.enabled=true', 'learning.idle_period=2',
            'learning.ppo.updates_per_window=1', 'learning.ppo.epochs=1', 'learning.ppo.batch_size=16',
        ])
        metrics = json.loads((self.dir / 'metrics.json').read_text())
        self.assertEqual(metrics['updates'], 1)
        self.assertEqual(len(self.rows('riskcov_pre.csv')), 101)
        self.assertEqual(len(self.rows('riskcov_post.csv')), 101)
        self.assertGreater(metrics['riskcov_records'], 0)
        self.assertTrue(0.0 <= metrics['riskcov_dominance'] <= 1.0)

    def test_ppo_frontier_files(self):
        self.call('sim', overrides=SMALL_SIM + [
            'learning.idle_period=2', 'learning.ppo.updates_per_window=1', 'learning.ppo.epochs=1',
            'scan.ppo_frontier=true', 'scan.lambdas=[8, 12]', 'scan.tau_grid.nodes=3',
        ])
        for name in ('frontier_pre_ppo.csv', 'frontier_post_ppo.csv'):
            rows = self.rows(name)
            self.assertEqual([float(r['lambda']) for r in rows], [8.0, 12.0])
            for row in rows:
                self.assertAlmostEqual(float(row['j']), float(row['q']) - float(row['lambda']) * float(row['c']),
                                       places=6)
        scan = json.loads((self.dir / 'scan.json').read_text())
        self.assertEqual(scan['ppo_frontier_updates'], 1)
        self.assertNotIn('argmax_tau', scan)
