from lab.management.commands._base import LabCommand
from lab.services import formats
from lab.services.sim import curve_dominance, risk_coverage_curve, score_grid

GRID_NODES = 101
DOMINANCE_PASS_SHARE = 0.8


class Command(LabCommand):
    help = 'Risk-coverage curve of the score threshold from a counterfactual step log'
    command_name = 'riskcov'

    def add_command_arguments(self, parser):
        parser.add_argument('step_log', help='steps.csv written by sim with sim.counterfactual=true')
        parser.add_argument('--compare', help='Second step log (e.g. post-training); compared at matched coverage')

    def run(self, config, out, options):
        records = formats.read_risk_records(options['step_log'])
        curve = risk_coverage_curve(records, score_grid([s for s, _ in records], GRID_NODES))
        formats.write_risk_coverage(out / 'riskcov.csv', curve)
        self.stdout.write(f"Wrote {len(curve)} curve nodes from {len(records)} steps")
        summary = {'records': len(records)}
        if options.get('compare'):
            other = formats.read_risk_records(options['compare'])
            curve = risk_coverage_curve(other, score_grid([s for s, _ in other], GRID_NODES))
            formats.write_risk_coverage(out / 'riskcov_compare.csv', curve)
            share = curve_dominance(records, other, GRID_NODES)
            passed = share >= DOMINANCE_PASS_SHARE
            formats.write_json(out / 'riskcov_dominance.json', {'share': share, 'passed': passed})
            self.report('compared curve at or below reference', passed, f'{share:.2%} of coverage nodes')
            summary['dominance'] = share
        return summary
