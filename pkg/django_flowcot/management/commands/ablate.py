from termcolor import colored

from ..base import FlowCotCommand
from ...workflows import run_ablation


class Command(FlowCotCommand):
    help = 'Trains and evaluates every combination of the [ablate] axes and merges the reports into summary tables'

    def run(self, config, out_dir, options):
        return run_ablation(config, out_dir, workers=options.get('workers') or 1)

    def report_payload(self, summary):
        failed = [cell for cell in summary['cells'] if cell['status'] != 'ok']
        self.stdout.write(u'{done} of {total} cells completed'.format(
            done=len(summary['cells']) - len(failed), total=len(summary['cells'])))
        for cell in failed:
            self.stdout.write(colored(u'{name}: {error}'.format(**cell), 'red'))
        for (mode, case), table in summary['by_iteration'].items():
            self.stdout.write(colored(u'\n{mode} {case}'.format(mode=mode, case=case), 'cyan', attrs=['bold']))
            self.stdout.write(table.to_string(float_format='{:.2f}'.format))
        for mode, table in summary['by_case'].items():
            self.stdout.write(colored(u'\n{mode} final iteration by partition'.format(mode=mode), 'cyan',
                                      attrs=['bold']))
            self.stdout.write(table.to_string(float_format='{:.2f}'.format))
