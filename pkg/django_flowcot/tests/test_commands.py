# -*- coding: utf-8 -*-
import os
import shutil
import tempfile
from io import StringIO

import pandas as pd
from django.core.management import CommandError
from django.test import SimpleTestCase, override_settings

from ..evaluation import EvalReport
from ..management import call_command
from ..manifest import RunManifest, manifest_path
from ..model import load_checkpoint
from ..training import read_training_log
from .fixtures import write_run_config


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()
        self.out = os.path.join(self.directory, 'out')
        self.config = write_run_config(self.directory)

    def tearDown(self):
        shutil.rmtree(self.directory)

    def configure(self, **sections):
        return write_run_config(self.directory, **sections)

    def run_command(self, name, *args, **options):
        out = StringIO()
        call_command(name, '-c', options.pop('config', self.config), '-o', options.pop('out', self.out), *args,
                     stdout=out, **options)
        return out.getvalue()

    def manifest(self, command, out=None):
        return RunManifest.read(manifest_path(out or self.out, command))


class TestPretrain(CommandTestCase):
    def test_writes_the_backbone(self):
        output = self.run_command('pretrain')
        manifest = self.manifest('pretrain')
        self.assertEqual(sorted(manifest.artifacts), ['backbone', 'log'])
        self.assertEqual(manifest.command, 'pretrain')
        self.assertEqual(load_checkpoint(manifest.artifacts['backbone']).model.config.num_iterations, 1)
        self.assertEqual(len(read_training_log(manifest.artifacts['log'])), 2)
        self.assertIn('pretrain (seed 0, config {checksum})'.format(checksum=manifest.config_checksum[:12]), output)
        self.assertIn(manifest.artifacts['backbone'], output)

    def test_rerun_skips_an_up_to_date_backbone(self):
        self.run_command('pretrain')
        path = os.path.join(self.out, 'backbone.pt')
        before = load_checkpoint(path).checksum
        output = self.run_command('pretrain')
        self.assertIn('is up to date, skipping', output)
        self.assertEqual(load_checkpoint(path).checksum, before)
        self.assertEqual(len(self.manifest('pretrain').notices), 1)

    def test_seed_option_overrides_the_configuration(self):
        self.run_command('pretrain', '--seed', '5')
        self.assertEqual(self.manifest('pretrain').seed, 5)

    def test_output_directory_from_settings(self):
        with self.settings(FLOWCOT_OUTPUT_DIR=os.path.join(self.directory, 'default')):
            call_command('pretrain', '-c', self.config, stdout=StringIO())
        self.assertTrue(os.path.exists(manifest_path(os.path.join(self.directory, 'default'), 'pretrain')))


class TestLadder(CommandTestCase):
    def test_three_frozen_teachers_of_growing_size(self):
        output = self.run_command('ladder')
        artifacts = self.manifest('ladder').artifacts
        self.assertEqual(sorted(artifacts), ['teacher-1', 'teacher-2', 'teacher-3'])
        checkpoints = [load_checkpoint(artifacts['teacher-{rank}'.format(rank=rank)]) for rank in (1, 2, 3)]
        self.assertTrue(all(checkpoint.frozen for checkpoint in checkpoints))
        sizes = [checkpoint.model.num_parameters() for checkpoint in checkpoints]
        self.assertEqual(sizes, sorted(set(sizes)))
        self.assertIn('teacher 3: {count} parameters'.format(count=sizes[2]), output)

    def test_rerun_reuses_every_teacher(self):
        self.run_command('ladder')
        self.run_command('ladder')
        self.assertEqual(len(self.manifest('ladder').notices), 3)

    def test_duplicate_ranks(self):
        config = self.configure(ladder={'teachers': [{'capacity_rank': 1, 'model_dim': 8, 'num_layers': 2},
                                                     {'capacity_rank': 1, 'model_dim': 16, 'num_layers': 2}]})
        with self.assertRaises(CommandError) as cm:
            self.run_command('ladder', config=config)
        self.assertEqual(cm.exception.returncode, 2)
        self.assertIn('duplicate capacity ranks', str(cm.exception))


class TestTrain(CommandTestCase):
    def test_sft_logs_cross_entropy_only(self):
        config = self.configure(plan={'mode': 'sft'})
        output = self.run_command('train', config=config)
        self.assertIn('fine-tuning starts from a fresh initialisation', output)
        records = read_training_log(os.path.join(self.out, 'train-log.jsonl'))
        self.assertEqual(len(records), 2)
        self.assertTrue(all('kl' not in record and len(record['ce']) == 1 for record in records))
        checkpoint = load_checkpoint(os.path.join(self.out, 'model.pt'))
        self.assertEqual(checkpoint.metadata['mode'], 'sft')
        self.assertEqual(checkpoint.model.config.num_iterations, 1)

    def test_scout_logs_one_divergence_per_iteration(self):
        config = self.configure(plan={'mode': 'scout'})
        self.run_command('ladder', config=config)
        self.run_command('train', config=config)
        records = read_training_log(os.path.join(self.out, 'train-log.jsonl'))
        self.assertTrue(all(len(record['kl']) == 3 for record in records))

    def test_starts_from_the_pretrained_backbone(self):
        self.run_command('pretrain')
        output = self.run_command('train')
        self.assertNotIn('fresh initialisation', output)
        self.assertEqual(load_checkpoint(os.path.join(self.out, 'model.pt')).model.config.num_iterations, 3)

    def test_distillation_without_a_ladder(self):
        config = self.configure(plan={'mode': 'r_distill_eq'})
        with self.assertRaises(CommandError) as cm:
            self.run_command('train', config=config)
        self.assertEqual(cm.exception.returncode, 3)
        self.assertIn('run the ladder command first', str(cm.exception))

    def test_unknown_mode(self):
        config = self.configure(plan={'mode': 'rlhf'})
        with self.assertRaises(CommandError) as cm:
            self.run_command('train', config=config)
        self.assertEqual(cm.exception.returncode, 2)
        for mode in ('sft', 'dsft', 'r_sft', 'r_distill_eq', 'r_distill_wt', 'r_scout', 'scout'):
            self.assertIn(mode, str(cm.exception))


class TestEval(CommandTestCase):
    def setUp(self):
        super(TestEval, self).setUp()
        self.run_command('train')

    def test_report_per_iteration(self):
        output = self.run_command('eval')
        frame = pd.read_csv(os.path.join(self.out, 'eval-report.csv'), dtype=str)
        self.assertEqual(list(frame.columns), ['iteration', 'accuracy'])
        self.assertEqual(list(frame['iteration']), ['1', '2', '3', 'avg'])
        report = EvalReport.from_json(os.path.join(self.out, 'eval-report.json'))
        self.assertEqual(report.metadata['mode'], 'r_sft')
        self.assertEqual(report.metadata['mechanism'], 'xattn')
        self.assertIn('avg', output)

    def test_against_a_baseline(self):
        self.run_command('eval')
        baseline = os.path.join(self.directory, 'baseline.json')
        shutil.copy(os.path.join(self.out, 'eval-report.json'), baseline)
        self.run_command('eval', '-b', baseline)
        frame = pd.read_csv(os.path.join(self.out, 'eval-report.csv'), dtype=str)
        self.assertEqual(list(frame.columns), ['iteration', 'accuracy', 'delta'])
        self.assertEqual(list(frame['delta']), ['+0.00'] * 4)

    def test_baseline_of_another_task(self):
        baseline = os.path.join(self.directory, 'baseline.json')
        EvalReport(task='addsub', split='dev', per_iteration_accuracy=[0.5]).to_json(baseline)
        with self.assertRaises(CommandError) as cm:
            self.run_command('eval', '--baseline', baseline)
        self.assertEqual(cm.exception.returncode, 3)
        self.assertIn('eval failed', str(cm.exception))

    def test_unreadable_baseline(self):
        baseline = os.path.join(self.directory, 'baseline.json')
        for content in ('{not json', '[0.5, 0.6]', '{"task": "modadd", "split": "dev"}',
                        '{"task": "modadd", "split": "dev", "per_iteration_accuracy": [1.5]}'):
            with open(baseline, 'w') as baseline_file:
                baseline_file.write(content)
            with self.assertRaises(CommandError) as cm:
                self.run_command('eval', '--baseline', baseline)
            self.assertEqual(cm.exception.returncode, 3)
            self.assertIn(baseline, str(cm.exception))

    def test_checkpoint_of_another_task(self):
        self.assertEqual(load_checkpoint(os.path.join(self.out, 'model.pt')).metadata['task'],
                         {'task': 'modadd', 'modulus': 7})
        config = self.configure(data={'modulus': 5})
        with self.assertRaises(CommandError) as cm:
            self.run_command('eval', config=config)
        self.assertEqual(cm.exception.returncode, 3)
        self.assertIn('was trained for', str(cm.exception))

    def test_missing_checkpoint(self):
        with self.assertRaises(CommandError) as cm:
            self.run_command('eval', out=os.path.join(self.directory, 'elsewhere'))
        self.assertEqual(cm.exception.returncode, 3)

    def test_early_stopping(self):
        config = self.configure(eval={'early_stop': 'consistency'})
        output = self.run_command('eval', config=config)
        self.assertIn('early stop (consistency)', output)

    def test_kl_ladder(self):
        self.run_command('ladder')
        self.run_command('eval', '--kl-ladder')
        frame = pd.read_csv(os.path.join(self.out, 'kl-ladder.csv'))
        self.assertEqual(list(frame.columns), ['capacity_rank', 'mean_kl'])
        self.assertEqual(list(frame['capacity_rank']), [1, 2, 3])


class TestHeatmap(CommandTestCase):
    def setUp(self):
        super(TestHeatmap, self).setUp()
        self.run_command('train')

    def test_given_prompt_and_candidates(self):
        self.run_command('heatmap', '--prompt', '1,7,3,8', '--candidates', '2,5')
        frame = pd.read_csv(os.path.join(self.out, 'heatmap.csv'))
        self.assertEqual(list(frame.columns), ['iteration', 'token_2', 'token_5', 'other'])
        self.assertEqual(len(frame), 3)

    def test_defaults_to_the_first_dev_example(self):
        output = self.run_command('heatmap')
        self.assertIn('no prompt given', output)
        self.assertIn('no candidates given', output)

    def test_candidate_outside_the_vocabulary(self):
        with self.assertRaises(CommandError) as cm:
            self.run_command('heatmap', '--candidates', '42')
        self.assertEqual(cm.exception.returncode, 3)


class TestAblate(CommandTestCase):
    def test_two_mechanisms(self):
        output = self.run_command('ablate', '-w', '2')
        cells = pd.read_csv(os.path.join(self.out, 'ablate', 'cells.csv'))
        self.assertEqual(list(cells['mechanism']), ['init', 'xattn'])
        self.assertEqual(list(cells['status']), ['ok', 'ok'])
        summary = pd.read_csv(os.path.join(self.out, 'ablate', 'summary-r_sft-case2.csv'))
        self.assertEqual(list(summary.columns), ['iteration', 'init', 'xattn'])
        self.assertTrue(os.path.exists(os.path.join(self.out, 'ablate', 'partition-r_sft.csv')))
        self.assertIn('2 of 2 cells completed', output)

    def test_failed_cells_are_recorded(self):
        config = self.configure(ablate={'modes': ['scout']})
        output = self.run_command('ablate', config=config)
        cells = pd.read_csv(os.path.join(self.out, 'ablate', 'cells.csv'))
        self.assertEqual(list(cells['status']), ['failed', 'failed'])
        self.assertIn('0 of 2 cells completed', output)


class TestWithoutPresets(CommandTestCase):
    def test_missing_configuration(self):
        with self.assertRaises(CommandError) as cm:
            call_command('pretrain', stdout=StringIO())
        self.assertEqual(cm.exception.returncode, 2)
        self.assertIn('no configuration given', str(cm.exception))

    def test_preset_option_fails(self):
        with self.assertRaises(CommandError) as cm:
            call_command('pretrain', '-p', 'desk')
        msg = u'Preset specified but FLOWCOT_PRESETS is not configured in settings'
        self.assertEqual(str(cm.exception), msg)
        self.assertEqual(cm.exception.returncode, 2)


@override_settings(FLOWCOT_PRESETS=[{'desk': {'seed': 3}}])
class TestWithMisconfiguredSetting(CommandTestCase):
    def test_preset_option_fails(self):
        with self.assertRaises(CommandError) as cm:
            call_command('pretrain', '-p', 'desk')
        self.assertEqual(str(cm.exception), u'FLOWCOT_PRESETS is not a dict-like object')
        self.assertEqual(cm.exception.returncode, 2)


class TestPresets(CommandTestCase):
    def presets(self):
        return {
            'desk': {'config': self.config, 'out': self.out},
            'desk_seed': {'config': self.config, 'out': self.out, 'seed': 3},
            'preset_is_a_list': [self.config],
        }

    def test_error_raised_when_using_default_call_command(self):
        from django.core.management import call_command
        with self.settings(FLOWCOT_PRESETS=self.presets()):
            with self.assertRaises(CommandError) as cm:
                call_command('pretrain', '-p', 'desk')
        msg = "--preset mode is not compatible with django.core.management.call_command: " \
              "you need to use django_flowcot.management.call_command instead"
        self.assertEqual(str(cm.exception), msg)

    def test_configuration_from_preset(self):
        with self.settings(FLOWCOT_PRESETS=self.presets()):
            call_command('pretrain', '-p', 'desk', stdout=StringIO())
        self.assertEqual(self.manifest('pretrain').seed, 0)

    def test_command_line_overrides_preset(self):
        with self.settings(FLOWCOT_PRESETS=self.presets()):
            call_command('pretrain', '-p', 'desk_seed', '--seed', '4', stdout=StringIO())
        self.assertEqual(self.manifest('pretrain').seed, 4)

    def test_seed_from_preset(self):
        with self.settings(FLOWCOT_PRESETS=self.presets()):
            call_command('pretrain', '-p', 'desk_seed', stdout=StringIO())
        self.assertEqual(self.manifest('pretrain').seed, 3)

    def test_misconfigured_preset(self):
        with self.settings(FLOWCOT_PRESETS=self.presets()):
            with self.assertRaises(CommandError) as cm:
                call_command('pretrain', '-p', 'preset_is_a_list')
        self.assertEqual(str(cm.exception), 'Preset "preset_is_a_list" is not a dict-like object')
        self.assertEqual(cm.exception.returncode, 2)

    def test_unknown_preset(self):
        with self.settings(FLOWCOT_PRESETS=self.presets()):
            with self.assertRaises(CommandError) as cm:
                call_command('pretrain', '-p', 'what_preset')
        msg = 'Preset "what_preset" not found in FLOWCOT_PRESETS. Available values are: ' \
              'desk, desk_seed, preset_is_a_list'
        self.assertEqual(str(cm.exception), msg)
        self.assertEqual(cm.exception.returncode, 2)
