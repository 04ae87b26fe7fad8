import logging
import sys
from functools import partial
from pathlib import Path

from decouple import Csv
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from cord_lab.exceptions import ArtifactIOError, CheckpointError, ConfigError, CordError, NonFiniteError

from training.config import METHODS, resolve_config
from training.experiments import (
    COMPARE_ARMS,
    SWEEP_PARAMS,
    compare,
    run_analyze,
    run_eval,
    run_experiment,
    run_generate_data,
    run_grad_check,
    run_pretrain,
    sweep,
)

logger = logging.getLogger(__name__)

SUBCOMMANDS = ('generate-data', 'pretrain', 'train', 'eval', 'analyze', 'grad-check', 'sweep', 'compare')

EXIT_USAGE = 1
EXIT_NON_FINITE = 2
EXIT_IO = 3


def _usage_error(parser, message):
    """Usage errors exit 1 from the shell and raise CommandError under call_command"""
    if getattr(parser, 'called_from_command_line', False):
        parser.print_usage(sys.stderr)
        parser.exit(EXIT_USAGE, f"{parser.prog}: error: {message}\n")
    raise CommandError(f"Error: {message}", returncode=EXIT_USAGE)


class Command(BaseCommand):
    help = "Run the CORD pipeline: data generation, pretraining, alignment arms, evaluation and analysis"

    requires_system_checks = []

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.error = partial(_usage_error, parser)
        return parser

    def add_arguments(self, parser):
        subparsers = parser.add_subparsers(dest='subcommand', metavar='{' + ','.join(SUBCOMMANDS) + '}')
        subparsers.required = True

        helps = {
            'generate-data': 'Write paired text/audio datasets and the auxiliary audio task',
            'pretrain': 'Pretrain the base model that exhibits the modality gap',
            'train': 'Train one alignment arm from the base checkpoint',
            'eval': 'Evaluate a checkpoint per modality and report the gap',
            'analyze': 'Divergence statistics of on-policy rollouts',
            'grad-check': 'Finite-difference check of every training loss',
            'sweep': 'Sweep the weighting intensity alpha = beta',
            'compare': 'Train several arms over several seeds and report seed medians',
        }
        commands = {}
        for name in SUBCOMMANDS:
            sub = subparsers.add_parser(name, help=helps[name])
            sub.error = partial(_usage_error, sub)
            self._add_common(sub)
            commands[name] = sub

        for name in ('eval', 'analyze'):
            commands[name].add_argument('--checkpoint', help='Checkpoint to load (default: the base checkpoint)')
        commands['analyze'].add_argument('--trajectories', help='Analyze a trajectory dump instead of fresh rollouts')
        commands['analyze'].add_argument('--bins', type=int, default=20, help='Histogram bins (default: 20)')
        commands['analyze'].add_argument('--q', type=float, default=80.0, help='Percentile threshold (default: 80)')
        commands['grad-check'].add_argument('--eps', type=float, help='Finite-difference step')
        commands['grad-check'].add_argument('--precision', choices=('f64', 'f32'), default='f64')
        commands['grad-check'].add_argument('--max-entries', type=int, default=4,
                                            help='Entries sampled per parameter (default: 4)')
        commands['sweep'].add_argument('--param', choices=SWEEP_PARAMS, default='alpha_beta')
        commands['sweep'].add_argument('--values', type=Csv(cast=float), default='1.0,1.5,2.0,2.5',
                                       help='Comma-separated values (default: 1.0,1.5,2.0,2.5)')
        commands['compare'].add_argument('--arms', type=Csv(), default=','.join(COMPARE_ARMS),
                                         help=f"Comma-separated arms from {', '.join(COMPARE_ARMS)} (default: all)")
        commands['compare'].add_argument('--seeds', type=Csv(cast=int), default='0,1,2',
                                         help='Comma-separated seeds (default: 0,1,2)')

    def _add_common(self, parser):
        parser.add_argument('--config', help='key=value experiment config file')
        parser.add_argument('--out', help='Output directory (default: under CORD_OUTPUT_ROOT)')
        parser.add_argument('--seed', type=int, help='Master seed')
        parser.add_argument('--method', choices=METHODS, help='Alignment arm')
        parser.add_argument('--steps', type=int, help='Training steps')
        parser.add_argument('--override', action='append', default=[], metavar='KEY=VALUE',
                            help='Config override, repeatable; applied after --config and flags')

    def handle(self, *args, **options):
        subcommand = options['subcommand']
        try:
            config = resolve_config(
                options['config'],
                flags={'seed': options['seed'], 'method': options['method'], 'max_steps': options['steps']},
                overrides=options['override'],
            )
            out_dir = Path(options['out']) if options['out'] else self._default_out(subcommand, config)
            result = self._dispatch(subcommand, config, out_dir, options)
        except ConfigError as e:
            raise CommandError(f"Configuration error: {e}", returncode=EXIT_USAGE) from e
        except NonFiniteError as e:
            logger.error(f"{subcommand} aborted: {e}")
            raise CommandError(f"Non-finite value: {e}", returncode=EXIT_NON_FINITE) from e
        except (ArtifactIOError, CheckpointError, OSError) as e:
            logger.error(f"{subcommand} aborted: {e}")
            raise CommandError(f"I/O failure: {e}", returncode=EXIT_IO) from e
        except CordError as e:
            raise CommandError(str(e), returncode=EXIT_USAGE) from e

        if subcommand == 'grad-check' and not result.passed:
            self.stdout.write(self.style.WARNING(result.summary()))
            raise CommandError("Gradient check failed", returncode=EXIT_USAGE)
        self.stdout.write(self.style.SUCCESS(result.summary()))

    def _default_out(self, subcommand, config):
        root = Path(settings.CORD_OUTPUT_ROOT)
        if subcommand == 'generate-data':
            return config.data_path
        if subcommand == 'pretrain':
            return config.base_checkpoint_path.parent
        if subcommand == 'train':
            return root / config.arm
        return root / subcommand

    def _dispatch(self, subcommand, config, out_dir, options):
        logger.info(f"cord {subcommand} -> {out_dir}")
        if subcommand == 'generate-data':
            return run_generate_data(config, out_dir)
        if subcommand == 'pretrain':
            return run_pretrain(config, out_dir)
        if subcommand == 'train':
            return run_experiment(config, out_dir)
        if subcommand == 'eval':
            return run_eval(config, out_dir, checkpoint=options['checkpoint'])
        if subcommand == 'analyze':
            return run_analyze(
                config, out_dir, checkpoint=options['checkpoint'], trajectories=options['trajectories'],
                bins=options['bins'], q=options['q'],
            )
        if subcommand == 'grad-check':
            return run_grad_check(
                config, out_dir, eps=options['eps'], precision=options['precision'],
                max_entries=options['max_entries'],
            )
        if subcommand == 'sweep':
            return sweep(config, options['values'], out_dir, param=options['param'])
        return compare(config, options['arms'], options['seeds'], out_dir)
