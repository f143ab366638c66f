from ..base import FlowCotCommand
from ...workflows import run_train


class Command(FlowCotCommand):
    help = 'Fine-tunes a student under the supervision plan named by plan.mode ' \
           '(sft, dsft, r_sft, r_distill_eq, r_distill_wt, r_scout or scout)'

    def run(self, config, out_dir, options):
        return run_train(config, out_dir)
