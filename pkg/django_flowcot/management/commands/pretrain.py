from ..base import FlowCotCommand
from ...workflows import run_pretrain


class Command(FlowCotCommand):
    help = 'Pretrains the single-iteration backbone that every fine-tuning run starts from'

    def run(self, config, out_dir, options):
        return run_pretrain(config, out_dir)
