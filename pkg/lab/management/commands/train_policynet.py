from dataclasses import replace

from lab.management.commands._base import LabCommand
from lab.serializers import norm_bounds
from lab.services import formats
from lab.services.controllers import PolicyNet, policynet_train
from lab.services.sim import offline_init, policynet_dataset


class Command(LabCommand):
    help = 'Train the PolicyNet router and save a checkpoint'
    command_name = 'train_policynet'

    def add_command_arguments(self, parser):
        parser.add_argument('--dataset', help='CSV with rtt_norm,bw_norm,s_norm,q_hat,label (overrides config)')

    def run(self, config, out, options):
        section = config['policynet_train']
        spec = config['controller']['policynet']
        dataset = options.get('dataset') or section['dataset']
        norm = norm_bounds(config)
        if dataset:
            features, labels = formats.read_policynet_dataset(dataset)
        else:
            run = self.run_config(config)
            lab = offline_init(run, needs_policynet=False)
            scores = [r.score for r in lab.calibration]
            if min(scores) < max(scores):
                norm = replace(norm, score=(min(scores), max(scores)))
            untrained = PolicyNet(spec['widths'], spec['activation'], norm=norm, seed=config['seed'])
            features, labels = policynet_dataset(lab.calibration, untrained, run.costs.lam)
            formats.write_policynet_dataset(out / 'policynet_dataset.csv', features, labels)
        net = PolicyNet(spec['widths'], spec['activation'], norm=norm, seed=config['seed'])
        result = policynet_train(net, features, labels, section['lr'], section['epochs'], section['batch'],
                                 config['seed'])
        formats.save_checkpoint(result.net, out / 'policynet.json')
        formats.write_csv(out / 'losses.csv', ['epoch', 'loss'], (
            [str(i + 1), formats.fmt(loss)] for i, loss in enumerate(result.losses)
        ))
        if result.degenerate:
            self.stdout.write(self.style.WARNING("Dataset has a single class; the router will be constant"))
        self.stdout.write(f"Trained on {len(labels)} rows, final loss {result.losses[-1]:.6f}")
        return {'rows': len(labels), 'final_loss': result.losses[-1], 'degenerate': result.degenerate}
