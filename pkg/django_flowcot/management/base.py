import argparse

import colorama
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from termcolor import colored

from ..config import load_config
from ..exceptions import ConfigError, FlowCotError

VALIDATION_ERROR = 2
RUNTIME_ERROR = 3


def positive_int(arg):
    try:
        value = int(arg)
    except ValueError:
        raise argparse.ArgumentTypeError("'{arg}' is not an integer".format(arg=arg))
    if value < 1:
        raise argparse.ArgumentTypeError('Must be at least 1')
    return value


def token_list(arg):
    """Comma-separated token ids, e.g. ``3,97,5,98``."""
    if isinstance(arg, (list, tuple)):
        return [int(token) for token in arg]
    try:
        return [int(token) for token in arg.split(',') if token.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("Token lists must be comma-separated integers, got '{arg}'".format(arg=arg))


class FlowCotCommand(BaseCommand):
    """Shared options, preset handling, error translation and output for the flowcot commands.

    Subclasses implement ``run(config, out_dir, options)`` and return a
    ``workflows.Outcome``. Validation failures exit with status 2, runtime
    failures with status 3.
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', '-c', help='Path of the YAML run configuration')
        parser.add_argument('--seed', type=int, help='Root seed, overriding the [seed] section of the configuration')
        parser.add_argument('--out', '-o', help='Directory for artifacts. Defaults to FLOWCOT_OUTPUT_DIR if defined '
                            'in settings, otherwise "runs".')
        parser.add_argument('--workers', '-w', type=positive_int, default=1,
                            help='Maximum number of runs executed concurrently')
        parser.add_argument('--preset', '-p', help='The name of a preset configuration in FLOWCOT_PRESETS. '
                            'FLOWCOT_PRESETS should be a dict of dicts, with each config dict providing '
                            'default values for any number of parser args.')
        self.add_command_arguments(parser)
        self.parser = parser

    def add_command_arguments(self, parser):
        pass

    def handle(self, **options):
        colorama.init()
        preset = self.get_preset(options['preset'])
        if preset:
            self.parser.set_defaults(**preset)
            # re-parse the command line arguments with new defaults in place
            try:
                options = dict(vars(self.parser.parse_args(self.raw_args)), **getattr(self, 'keyword_options', {}))
            except AttributeError:
                if not self._called_from_command_line:
                    # regular call_command doesn't store raw_args
                    msg = '--preset mode is not compatible with django.core.management.call_command: you need to ' \
                          'use django_flowcot.management.call_command instead'
                    raise CommandError(msg)
                else:
                    raise
        try:
            config = self.get_config(options)
            outcome = self.run(config, self.get_out_dir(options), options)
        except ConfigError as e:
            raise CommandError(u'Invalid configuration: {error}'.format(error=e), returncode=VALIDATION_ERROR)
        except FlowCotError as e:
            raise CommandError(u'{command} failed: {error}'.format(command=self.name, error=e),
                               returncode=RUNTIME_ERROR)
        self.report(outcome)

    def run_from_argv(self, argv):
        # store raw args so that we can re-parse them with new defaults if preset mode is used
        self.raw_args = argv[2:]
        super(FlowCotCommand, self).run_from_argv(argv)

    @property
    def name(self):
        return self.__class__.__module__.rsplit('.', 1)[-1]

    def run(self, config, out_dir, options):
        raise NotImplementedError('subclasses of FlowCotCommand must provide a run() method')

    def get_config(self, options):
        if not options.get('config'):
            raise ConfigError(u'no configuration given, pass --config or use a preset that sets it')
        config = load_config(options['config'])
        if options.get('seed') is not None:
            config = config.with_seed(options['seed'])
        return config

    def get_out_dir(self, options):
        return options.get('out') or getattr(settings, 'FLOWCOT_OUTPUT_DIR', 'runs')

    def get_preset(self, preset_name):
        if not preset_name:
            return None
        try:
            presets = getattr(settings, 'FLOWCOT_PRESETS')
        except AttributeError:
            raise CommandError(u'Preset specified but FLOWCOT_PRESETS is not configured in settings',
                               returncode=VALIDATION_ERROR)
        try:
            preset = presets[preset_name]
        except TypeError:
            msg = u'FLOWCOT_PRESETS is not a dict-like object'
            raise CommandError(msg, returncode=VALIDATION_ERROR)
        except KeyError:
            msg = u'Preset "{preset_name}" not found in FLOWCOT_PRESETS. Available values are: {values}'
            raise CommandError(msg.format(preset_name=preset_name, values=', '.join(sorted(presets.keys()))),
                               returncode=VALIDATION_ERROR)
        try:
            preset.keys()
        except AttributeError:
            msg = u'Preset "{preset_name}" is not a dict-like object'
            raise CommandError(msg.format(preset_name=preset_name), returncode=VALIDATION_ERROR)
        return preset

    def report(self, outcome):
        manifest = outcome.manifest
        self.stdout.write(colored(u'\n{command} (seed {seed}, config {checksum})'.format(
            command=manifest.command, seed=manifest.seed, checksum=manifest.config_checksum[:12]),
            'cyan', attrs=['bold']))
        for notice in manifest.notices:
            self.stdout.write(colored(notice, 'yellow'))
        for name, path in sorted(manifest.artifacts.items()):
            self.stdout.write(colored(u'{name} {path}'.format(name=name, path=path), 'green', attrs=['bold']))
        self.report_payload(outcome.payload)

    def report_payload(self, payload):
        pass

    def get_version(self):
        from ..version import VERSION
        return VERSION
