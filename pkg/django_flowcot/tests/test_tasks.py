# -*- coding: utf-8 -*-
from django.test import SimpleTestCase

from ..exceptions import ConfigError
from ..tasks import TaskSpec, build_dataset
from .fixtures import tiny_task


class TestModularAddition(SimpleTestCase):
    def test_examples_are_correct(self):
        dataset = build_dataset(tiny_task(), 'train')
        for (a, b), answer in zip(dataset.keys, dataset.answers.tolist()):
            self.assertEqual(answer, [(a + b) % 7])

    def test_splits_partition_every_pair(self):
        spec = tiny_task()
        keys = [set(build_dataset(spec, split).keys) for split in ('train', 'dev', 'test')]
        self.assertFalse(keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])
        self.assertEqual(len(keys[0] | keys[1] | keys[2]), 49)

    def test_vocabulary(self):
        self.assertEqual(TaskSpec(name='modadd', modulus=97).vocab_size, 99)

    def test_mask_covers_the_answer_predictions(self):
        dataset = build_dataset(tiny_task(), 'dev')
        self.assertEqual(dataset.mask[0].tolist(), [False, False, False, True])
        self.assertEqual(dataset.targets[0, -1].item(), dataset.answers[0, 0].item())

    def test_checksum_is_stable(self):
        self.assertEqual(build_dataset(tiny_task(), 'train').checksum(),
                         build_dataset(tiny_task(), 'train').checksum())


class TestSampledTasks(SimpleTestCase):
    def test_addsub_answers(self):
        spec = TaskSpec(name='addsub', num_digits=2, train_size=50)
        dataset = build_dataset(spec, 'train')
        for (a, op, b), answer in zip(dataset.keys, dataset.answers.tolist()):
            result = a + b if op == 10 else a - b
            self.assertEqual(answer[0], 10 if result >= 0 else 11)
            self.assertEqual(int(''.join(str(digit) for digit in answer[1:])), abs(result))

    def test_reverse_and_copy(self):
        for name in ('reverse', 'copy'):
            spec = TaskSpec(name=name, sequence_length=4, alphabet_size=5, train_size=20)
            dataset = build_dataset(spec, 'train')
            for key, answer in zip(dataset.keys, dataset.answers.tolist()):
                self.assertEqual(answer, list(key)[::-1] if name == 'reverse' else list(key))

    def test_train_and_test_are_disjoint(self):
        spec = TaskSpec(name='copy', sequence_length=3, alphabet_size=4, train_size=40, test_size=10)
        self.assertFalse(set(build_dataset(spec, 'train').keys) & set(build_dataset(spec, 'test').keys))

    def test_unknown_task(self):
        with self.assertRaises(ConfigError):
            TaskSpec(name='sorting')

    def test_unknown_split(self):
        with self.assertRaises(ConfigError):
            build_dataset(tiny_task(), 'validation')


class TestIdentity(SimpleTestCase):
    def test_only_example_shaping_parameters_count(self):
        self.assertEqual(tiny_task().identity(), {'task': 'modadd', 'modulus': 7})
        self.assertEqual(tiny_task(dev_size=5, train_seed=3).identity(), tiny_task().identity())
        self.assertEqual(TaskSpec(name='addsub', num_digits=3).identity(), {'task': 'addsub', 'num_digits': 3})

    def test_different_tasks_differ(self):
        self.assertNotEqual(tiny_task().identity(), tiny_task(modulus=5).identity())
        self.assertNotEqual(TaskSpec(name='copy').identity(), TaskSpec(name='reverse').identity())
