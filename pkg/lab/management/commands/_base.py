import json
import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError
from django.db import DatabaseError
from rest_framework.exceptions import ValidationError

from lab.exceptions import DomainError, UsageError
from lab.models import ExperimentRun
from lab.serializers import ExperimentConfigSerializer, apply_override, run_config
from lab.services import formats

logger = logging.getLogger(__name__)


class LabCommand(BaseCommand):
    """
    Shared plumbing for lab commands: config loading and overrides, the
    effective-config echo, run recording and exit-code mapping.
    """
    command_name = None

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Experiment config JSON; missing keys take defaults')
        parser.add_argument('--out', help='Output directory (default: config output_dir)')
        parser.add_argument('--seed', type=int, help='Override the config seed')
        parser.add_argument(
            '--set', action='append', default=[], dest='overrides', metavar='KEY=JSON',
            help='Override a config key, e.g. --set econ.lambda=12 (repeatable)',
        )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def load_config(self, options) -> dict:
        raw = {}
        if options.get('config'):
            raw = formats.read_json(options['config'])
            if not isinstance(raw, dict):
                raise UsageError("Config must be a JSON object")
        for assignment in options.get('overrides') or []:
            apply_override(raw, assignment)
        if options.get('seed') is not None:
            raw['seed'] = options['seed']
        if options.get('out'):
            raw['output_dir'] = options['out']
        serializer = ExperimentConfigSerializer(data=raw)
        serializer.is_valid(raise_exception=True)
        # Plain dicts and lists only
        return json.loads(json.dumps(serializer.validated_data))

    def handle(self, *args, **options):
        config = None
        out = None
        try:
            config = self.load_config(options)
            out = Path(config['output_dir'])
            out.mkdir(parents=True, exist_ok=True)
            formats.write_json(out / 'effective_config.json', config)
            summary = self.run(config, out, options) or {}
        except ValidationError as exc:
            raise CommandError(f"Invalid config: {exc.detail}", returncode=2)
        except (UsageError, DomainError) as exc:
            raise CommandError(str(exc), returncode=2)
        except CommandError:
            raise
        except Exception as exc:
            logger.exception("%s failed", self.command_name)
            self.record(config, out, {'error': str(exc)}, 'failed')
            raise CommandError(f"{self.command_name} failed: {exc}", returncode=3)
        self.record(config, out, summary, 'completed')
        self.stdout.write(self.style.SUCCESS(f"{self.command_name}: outputs written to {out}"))

    def run(self, config: dict, out: Path, options: dict) -> dict:
        raise NotImplementedError

    def record(self, config, out, summary, status):
        if config is None:
            return
        try:
            ExperimentRun.objects.create(
                command=self.command_name,
                seed=config['seed'],
                output_dir=str(out),
                config=config,
                summary=summary,
                status=status,
            )
        except DatabaseError as exc:
            logger.warning("Could not record %s run: %s", self.command_name, exc)

    def report(self, name: str, passed: bool, detail: str = ''):
        line = f"{'PASS' if passed else 'FAIL'} {name}" + (f" ({detail})" if detail else '')
        self.stdout.write(self.style.SUCCESS(line) if passed else self.style.WARNING(line))

    def run_config(self, config: dict, **overrides):
        """RunConfig with corpus, trace and checkpoint files resolved"""
        if config['corpus']['path']:
            overrides.setdefault('tasks', tuple(formats.read_corpus(config['corpus']['path'])))
        if config['trace']['path']:
            overrides.setdefault('trace', tuple(formats.read_trace(config['trace']['path'])))
        checkpoint = config['controller']['policynet']['checkpoint']
        if checkpoint:
            overrides.setdefault('policynet', formats.load_checkpoint(checkpoint))
        return run_config(config, **overrides)
