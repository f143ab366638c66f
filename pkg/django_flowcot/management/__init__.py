from django.core.management import BaseCommand, CommandError, get_commands, load_command_class


def call_command(name, *args, **options):
    """
    Calls the given command, with the given options and args/kwargs.

    Same as django.core.management.call_command, except that the raw args are
    stored on the command instance so that ``--preset`` can re-parse them with
    the preset's values as defaults. Options passed as keyword arguments always
    win over the preset.

    Some examples:
        call_command('train', '--config', 'run.yaml')
        call_command('eval', '-c', 'run.yaml', '-p', 'desk', stdout=out)
    """
    try:
        app_name = get_commands()[name]
    except KeyError:
        raise CommandError("Unknown command: %r" % name)

    if isinstance(app_name, BaseCommand):
        command = app_name
    else:
        command = load_command_class(app_name, name)

    command.raw_args = [str(arg) for arg in args]

    parser = command.create_parser('', name)
    opt_mapping = {min(s_opt.option_strings).lstrip('-').replace('-', '_'): s_opt.dest
                   for s_opt in parser._actions if s_opt.option_strings}
    arg_options = {opt_mapping.get(key, key): value for key, value in options.items()}
    command.keyword_options = arg_options
    defaults = parser.parse_args(args=command.raw_args)
    defaults = dict(defaults._get_kwargs(), **arg_options)
    args = defaults.pop('args', ())
    if 'skip_checks' not in options:
        defaults['skip_checks'] = True

    return command.execute(*args, **defaults)
