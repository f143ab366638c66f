from termcolor import colored

from ..base import FlowCotCommand
from ...workflows import run_ladder


class Command(FlowCotCommand):
    help = 'Trains and freezes the teacher ladder, skipping teachers whose checkpoints are already up to date'

    def run(self, config, out_dir, options):
        return run_ladder(config, out_dir)

    def report_payload(self, ladder):
        for teacher in ladder:
            self.stdout.write(u'teacher {rank}: {count} parameters, final loss {loss}'.format(
                rank=teacher.spec.capacity_rank, count=teacher.model.num_parameters(),
                loss=colored('n/a' if teacher.final_loss is None else '{:.4f}'.format(teacher.final_loss), 'green')))
