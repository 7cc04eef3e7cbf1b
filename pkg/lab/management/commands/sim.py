import math
from dataclasses import replace

import numpy as np

from lab.management.commands._base import LabCommand
from lab.services import formats
from lab.services.sim import (
    POLICYNET,
    compare_controllers,
    curve_dominance,
    holdout_episodes,
    lambda_ordering,
    paired_seeds,
    ppo_frontier,
    regime_scan,
    rescored_risk_records,
    risk_coverage_curve,
    run_experiment,
    score_grid,
    threshold_scan,
)

# Paired comparisons pass when the first controller wins on at least this share of seeds
PAIRED_PASS_SHARE = 0.8
DOMINANCE_PASS_SHARE = 0.8


class Command(LabCommand):
    help = 'Run the routing loop over a corpus and trace; optional learning, comparisons and scans'
    command_name = 'sim'

    def run(self, config, out, options):
        run = self.run_config(config)
        result = run_experiment(run)
        summary = result.summary
        extra = {
            'controller': run.controller,
            'lambda': run.costs.lam,
            'tau0': result.lab.tau0,
            'window_offload': result.window_offload,
        }
        formats.write_step_log(out / 'steps.csv', result.records)
        if run.counterfactual:
            formats.write_tau0_records(out / 'tau0_records.csv', result.records)
        if run.learning:
            formats.write_diagnostics(out / 'diagnostics.csv', result.diagnostics)
            formats.write_cache(out / 'rm_cache.jsonl', result.caches.rm_snapshot())
            extra['updates'] = len(result.diagnostics)
            if len(result.window_offload) > 1:
                extra['offload_declined'] = result.window_offload[-1] < result.window_offload[0]
            if result.diagnostics:
                extra.update(self.pre_post_curves(result, run, out))
        formats.write_metrics(out / 'metrics.json', summary, extra)
        self.stdout.write(
            f"{run.controller}: mean J {summary.mean_j:.6f}, mean Q {summary.mean_q:.6f}, "
            f"total C {summary.total_c:.6f}, offload {summary.offload_rate:.4f}"
        )

        sim = config['sim']
        if sim['compare']:
            kinds = [run.controller] + [k for k in sim['compare'] if k != run.controller]
            shared = result.lab if POLICYNET not in kinds or result.lab.net is not None else None
            comparison = compare_controllers(run, kinds, shared)
            formats.write_json(out / 'comparison.json', {
                'summaries': {k: s.to_record() for k, s in comparison.summaries.items()},
                'mean_j_differences': comparison.differences,
            })
            for name, delta in sorted(comparison.differences.items()):
                self.stdout.write(f"mean J difference {name}: {delta:+.6f}")
            if sim['paired_seeds']:
                paired = paired_seeds(run, (kinds[0], kinds[1]), sim['paired_seeds'])
                needed = math.ceil(PAIRED_PASS_SHARE * len(paired.seeds))
                formats.write_json(out / 'paired.json', {
                    'first': paired.first, 'second': paired.second, 'seeds': paired.seeds,
                    'first_mean_j': paired.first_j, 'second_mean_j': paired.second_j,
                    'wins': paired.wins, 'passed': paired.wins >= needed,
                })
                self.report(f'{paired.first} >= {paired.second} on mean J', paired.wins >= needed,
                            f'{paired.wins}/{len(paired.seeds)} seeds')

        scan = config['scan']
        if scan['enabled'] or scan['regimes'] or scan['ppo_frontier']:
            self.run_scans(run, scan, result, out)
        return {'mean_j': summary.mean_j, 'offload_rate': summary.offload_rate, 'tasks': summary.tasks}

    def pre_post_curves(self, result, run, out) -> dict:
        held_out = holdout_episodes(run, result.lab)
        pre = rescored_risk_records(held_out, result.lab.rm)
        post = rescored_risk_records(held_out, result.rm)
        for name, records in (('pre', pre), ('post', post)):
            grid = score_grid([s for s, _ in records])
            formats.write_risk_coverage(out / f'riskcov_{name}.csv', risk_coverage_curve(records, grid))
        share = curve_dominance(pre, post)
        self.report('post-refresh risk at or below pre-refresh on held-out steps', share >= DOMINANCE_PASS_SHARE,
                    f'{share:.2%} of coverage nodes')
        return {'riskcov_dominance': share, 'riskcov_records': len(pre)}

    def run_scans(self, run, scan, result, out):
        frozen = replace(run, learning=False, counterfactual=False)
        lab = result.lab
        lo, hi = scan['tau_grid']['lo'], scan['tau_grid']['hi']
        scores = [r.score for r in result.lab.calibration]
        if lo is None:
            lo = float(np.quantile(scores, 0.01))
        if hi is None:
            hi = float(np.quantile(scores, 0.99))
        grid = np.linspace(lo, hi, scan['tau_grid']['nodes'])
        payload = {}
        if scan['enabled']:
            rows = threshold_scan(frozen, grid, scan['lambdas'], lab)
            formats.write_scan(out / 'scan.csv', rows)
            best, ordered = lambda_ordering(rows)
            payload['argmax_tau'] = {str(k): v for k, v in best.items()}
            payload['lambda_ordering_passed'] = ordered
            self.report('argmax tau nonincreasing in lambda', ordered)
        if scan['regimes']:
            best, ordered = regime_scan(frozen, scan['regimes'], scan['regime_lambda'], grid, lab)
            payload['regime_argmax_tau'] = best
            payload['regime_ordering_passed'] = ordered
            self.report(f"argmax tau ordered {' > '.join(scan['regimes'])}", ordered)
        if scan['ppo_frontier']:
            frontier = ppo_frontier(run, grid, scan['lambdas'], lab)
            formats.write_scan(out / 'frontier_pre_ppo.csv', frontier.pre)
            formats.write_scan(out / 'frontier_post_ppo.csv', frontier.post)
            payload['ppo_frontier_updates'] = frontier.updates
            gains = [post.j - pre.j for pre, post in zip(frontier.pre, frontier.post)]
            payload['ppo_frontier_mean_j_gain'] = float(np.mean(gains))
        formats.write_json(out / 'scan.json', payload)
