from ..base import FlowCotCommand
from ...workflows import run_eval


class Command(FlowCotCommand):
    help = 'Reports exact-match accuracy from every iteration of a trained model'

    def add_command_arguments(self, parser):
        parser.add_argument('--baseline', '-b', help='An eval-report.json to compare against; adds a delta column '
                            'in percentage points')
        parser.add_argument('--kl-ladder', '-k', action='store_true',
                            help='Also measure the mean KL divergence from each ladder teacher to the model')

    def run(self, config, out_dir, options):
        return run_eval(config, out_dir, baseline=options.get('baseline'), kl_ladder=options.get('kl_ladder', False))

    def report_payload(self, report):
        self.stdout.write(report.to_frame().to_string(index=False, float_format='{:.2f}'.format))
        early_stop = report.metadata.get('early_stop')
        if early_stop:
            self.stdout.write(u'early stop ({policy}): accuracy {accuracy:.2f}, mean stop iteration {stop:.2f}'.format(
                policy=early_stop['policy'], accuracy=100.0 * early_stop['accuracy'],
                stop=early_stop['mean_stop_iteration']))
