from lab.management.commands._base import LabCommand
from lab.serializers import custom_regimes, drift_params
from lab.services import formats
from lab.services.net_model import get_regime, make_trace, tile_schedule


class Command(LabCommand):
    help = 'Generate a regime-switching Gauss-Markov network trace CSV'
    command_name = 'trace'

    def add_command_arguments(self, parser):
        parser.add_argument('--steps', type=int, help='Number of trace steps (overrides trace.steps)')

    def load_config(self, options):
        if options.get('steps') is not None:
            options['overrides'] = list(options.get('overrides') or []) + [f"trace.steps={options['steps']}"]
        return super().load_config(options)

    def run(self, config, out, options):
        section = config['trace']
        regimes = custom_regimes(config)
        schedule = [(regimes.get(s['regime']) or get_regime(s['regime']), s['steps']) for s in section['schedule']]
        trace = make_trace(tile_schedule(schedule, section['steps']), drift_params(config), config['seed'])
        trace = trace[:section['steps']]
        formats.write_trace(out / 'trace.csv', trace)
        self.stdout.write(f"Wrote {len(trace)} trace steps")
        return {'steps': len(trace)}
