from lab.management.commands._base import LabCommand
from lab.services import formats


class Command(LabCommand):
    help = 'Generate a synthetic tool-calling corpus as JSON lines'
    command_name = 'corpus'

    def run(self, config, out, options):
        run = self.run_config(config)
        tasks = run.corpus.generate(run.corpus.size, run.seed)
        formats.write_corpus(out / 'corpus.jsonl', tasks)
        self.stdout.write(f"Wrote {len(tasks)} tasks")
        return {'tasks': len(tasks)}
