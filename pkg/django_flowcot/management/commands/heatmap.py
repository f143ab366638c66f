from ..base import FlowCotCommand, token_list
from ...workflows import run_heatmap


class Command(FlowCotCommand):
    help = 'Exports the next-token probability of candidate tokens after each iteration'

    def add_command_arguments(self, parser):
        parser.add_argument('--prompt', type=token_list, help='Comma-separated prompt token ids. Defaults to the '
                            'first dev prompt.')
        parser.add_argument('--candidates', type=token_list, help='Comma-separated candidate token ids. Defaults to '
                            'the first answer token of the first dev example.')

    def run(self, config, out_dir, options):
        return run_heatmap(config, out_dir, prompt=options.get('prompt'), candidates=options.get('candidates'))

    def report_payload(self, record):
        self.stdout.write(record.to_frame().to_string(index=False, float_format='{:.4f}'.format))
