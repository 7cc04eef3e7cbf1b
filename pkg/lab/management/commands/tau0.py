from lab.management.commands._base import LabCommand
from lab.services import formats
from lab.services.sim import offline_init
from lab.services.theory import empirical_tau0, threshold_utility


class Command(LabCommand):
    help = 'Empirical fixed threshold from (score, j_edge, j_cloud) records'
    command_name = 'tau0'

    def add_command_arguments(self, parser):
        parser.add_argument('--records', help='CSV with score,j_edge,j_cloud; default: run a calibration pass')

    def run(self, config, out, options):
        payload = {}
        if options.get('records'):
            records = formats.read_tau0_records(options['records'])
        else:
            lab = offline_init(self.run_config(config), needs_policynet=False)
            formats.write_tau0_records(out / 'tau0_records.csv', lab.calibration)
            records = [tuple(row) for row in lab.calibration_rows()[:, :3]]
            payload['funcdyn'] = {
                'tau0': lab.funcdyn.tau0, 'a_rtt': lab.funcdyn.a_rtt,
                'b_bw': lab.funcdyn.b_bw, 'g_hist': lab.funcdyn.g_hist,
            }
        tau0 = empirical_tau0(records)
        payload.update({'tau0': tau0, 'records': len(records), 'utility': threshold_utility(records, tau0)})
        formats.write_json(out / 'tau0.json', payload)
        self.stdout.write(f"tau0 = {tau0:.9g} over {len(records)} records")
        return payload
