# -*- coding: utf-8 -*-
import os
import shutil
import tempfile

import torch
import torch.nn.functional as F
from django.test import SimpleTestCase

from .. import numerics
from ..exceptions import CheckpointError, ConfigError, LatentStateError, NonFiniteError, ShapeError, TokenRangeError
from ..latent import LatentState
from ..model import (FlowTransformer, ModelConfig, PartitionCase, load_checkpoint, model_checksum, partition_model,
                     save_checkpoint)
from .fixtures import MECHANISMS, tiny_config, tiny_model

PROMPT = torch.tensor([[1, 7, 3, 8]])


class TestPartition(SimpleTestCase):
    def test_case2_splits_in_half(self):
        spec = partition_model(tiny_config(num_layers=4), 'case2')
        self.assertEqual(list(spec.head_layers), [0, 1])
        self.assertEqual(list(spec.recursive_layers), [2, 3])
        self.assertEqual(list(spec.tail_layers), [])

    def test_case1_splits_in_thirds(self):
        spec = partition_model(tiny_config(num_layers=6), PartitionCase.CASE1)
        self.assertEqual((len(spec.head_layers), len(spec.recursive_layers), len(spec.tail_layers)), (2, 2, 2))

    def test_case1_rounding(self):
        spec = partition_model(tiny_config(num_layers=4), 'case1')
        self.assertEqual((len(spec.head_layers), len(spec.recursive_layers), len(spec.tail_layers)), (2, 1, 1))

    def test_odd_case2(self):
        spec = partition_model(tiny_config(num_layers=5), 'case2')
        self.assertEqual((len(spec.head_layers), len(spec.recursive_layers)), (3, 2))

    def test_blocks_cover_every_layer(self):
        for layers in range(2, 10):
            for case in ('case1', 'case2'):
                spec = partition_model(tiny_config(num_layers=layers), case)
                covered = list(spec.head_layers) + list(spec.recursive_layers) + list(spec.tail_layers)
                self.assertEqual(covered, list(range(layers)))
                self.assertGreater(len(spec.recursive_layers), 0)

    def test_single_layer_is_rejected(self):
        with self.assertRaises(ConfigError):
            partition_model(tiny_config(num_layers=1), 'case2')

    def test_unknown_case(self):
        with self.assertRaises(ConfigError):
            partition_model(tiny_config(), 'case3')


class TestModelConfig(SimpleTestCase):
    def test_heads_must_divide_dim(self):
        with self.assertRaises(ConfigError) as cm:
            ModelConfig(vocab_size=9, model_dim=10, num_heads=4)
        self.assertIn('model.num_heads', str(cm.exception))

    def test_positive_sizes(self):
        with self.assertRaises(ConfigError):
            ModelConfig(vocab_size=0)


class TestForward(SimpleTestCase):
    def test_one_logit_tensor_per_iteration(self):
        outputs = tiny_model('xattn', num_iterations=3).forward_flow(PROMPT)
        self.assertEqual(outputs.num_iterations, 3)
        for logits in outputs.per_step_logits:
            self.assertEqual(tuple(logits.shape), (1, 4, 9))
        self.assertEqual([state.iteration_index for state in outputs.per_step_states], [1, 2, 3])

    def test_head_runs_once(self):
        model = tiny_model('gate', num_iterations=5)
        model.forward_flow(PROMPT)
        self.assertEqual(model.head_calls, 1)

    def test_first_iteration_ignores_the_mechanism(self):
        reference = tiny_model('init').forward_flow(PROMPT).per_step_logits[0]
        for kind in MECHANISMS:
            logits = tiny_model(kind).forward_flow(PROMPT).per_step_logits[0]
            self.assertTrue(torch.equal(logits, reference), kind)

    def test_xattn_starts_as_a_repeat_of_the_first_iteration(self):
        outputs = tiny_model('xattn').forward_flow(PROMPT)
        for logits in outputs.per_step_logits[1:]:
            self.assertTrue(torch.equal(logits, outputs.per_step_logits[0]))

    def test_single_iteration(self):
        outputs = tiny_model('catproj', num_iterations=1).forward_flow(PROMPT)
        self.assertEqual(outputs.num_iterations, 1)

    def test_states_are_causal(self):
        model = tiny_model('catproj')
        first = model.forward_flow(PROMPT).final_logits
        changed = PROMPT.clone()
        changed[0, -1] = 2
        second = model.forward_flow(changed).final_logits
        self.assertTrue(torch.equal(first[:, :-1], second[:, :-1]))

    def test_reproducible(self):
        self.assertTrue(torch.equal(tiny_model('modinj', seed=3).forward_flow(PROMPT).final_logits,
                                    tiny_model('modinj', seed=3).forward_flow(PROMPT).final_logits))

    def test_token_out_of_range(self):
        with self.assertRaises(TokenRangeError):
            tiny_model().forward_flow(torch.tensor([[1, 9]]))

    def test_too_long(self):
        with self.assertRaises(ShapeError):
            tiny_model().forward_flow(torch.zeros(1, 9, dtype=torch.long))

    def test_empty_sequence(self):
        with self.assertRaises(ShapeError):
            tiny_model().forward_flow(torch.zeros(1, 0, dtype=torch.long))

    def test_recursive_step_needs_head_output(self):
        model = tiny_model('add')
        z0 = model.encode_head(PROMPT)
        z1 = model.recursive_step(z0)
        with self.assertRaises(LatentStateError):
            model.recursive_step(z1, z1)

    def test_recursive_step_past_the_last_iteration(self):
        model = tiny_model('add', num_iterations=1)
        z0 = model.encode_head(PROMPT)
        with self.assertRaises(LatentStateError):
            model.recursive_step(z0, model.recursive_step(z0))

class TestGradientFlow(SimpleTestCase):
    def test_every_block_receives_gradient(self):
        prompts = torch.tensor([[1, 7, 3, 8], [2, 7, 4, 8], [0, 7, 6, 8]])
        for kind in MECHANISMS:
            model = tiny_model(kind, case='case1')
            generator = torch.Generator().manual_seed(4)
            for parameter in model.retrospective.parameters():
                numerics.normal_init_(parameter, generator, std=0.5)
            targets = torch.randint(0, 9, (3 * 4,), generator=generator)
            loss = sum(F.cross_entropy(logits.reshape(-1, 9), targets)
                       for logits in model.forward_flow(prompts).per_step_logits)
            loss.backward()
            for name, parameter in model.named_parameters():
                if name.endswith('key.bias'):
                    # attention scores are shift invariant per query
                    continue
                self.assertIsNotNone(parameter.grad, (kind, name))
                self.assertGreater(parameter.grad.abs().sum().item(), 0.0, (kind, name))


class TestTail(SimpleTestCase):
    def test_one_tail_decodes_every_iteration(self):
        model = tiny_model('gate', case='case1')
        outputs = model.forward_flow(PROMPT)
        for state, logits in zip(outputs.per_step_states, outputs.per_step_logits):
            self.assertTrue(torch.equal(model.decode_tail(state), logits))

    def test_changing_the_tail_changes_every_iteration(self):
        model = tiny_model('gate', case='case1')
        before = model.forward_flow(PROMPT).per_step_logits
        tail = model.layers[model.partition.tail_layers[0]]
        with torch.no_grad():
            tail.feed_forward.fc_out.bias[0] += 0.5
        after = model.forward_flow(PROMPT).per_step_logits
        for old, new in zip(before, after):
            self.assertFalse(torch.allclose(old, new))


class TestLatentState(SimpleTestCase):
    def test_values_must_be_finite(self):
        values = torch.zeros(1, 2, 8, dtype=numerics.DTYPE)
        values[0, 1, 3] = float('nan')
        with self.assertRaises(NonFiniteError):
            LatentState(values, 1)
        values[0, 1, 3] = float('inf')
        with self.assertRaises(NonFiniteError):
            LatentState(values)

    def test_shape_and_index(self):
        with self.assertRaises(LatentStateError):
            LatentState(torch.zeros(2, 8, dtype=numerics.DTYPE))
        with self.assertRaises(LatentStateError):
            LatentState(torch.zeros(1, 2, 8, dtype=numerics.DTYPE), -1)

    def test_non_finite_recursion_fails_at_the_step(self):
        model = tiny_model('add')
        z0 = model.encode_head(PROMPT)
        with torch.no_grad():
            model.layers[model.partition.recursive_layers[0]].feed_forward.fc_out.bias[0] = float('nan')
        with self.assertRaises(NonFiniteError):
            model.recursive_step(z0)



class TestGreedyDecode(SimpleTestCase):
    def test_length_and_range(self):
        model = tiny_model('xattn')
        tokens = model.greedy_decode(PROMPT, 3, iteration=2)
        self.assertEqual(tuple(tokens.shape), (1, 3))
        self.assertTrue(bool(((tokens >= 0) & (tokens < 9)).all()))

    def test_matches_argmax_of_the_chosen_iteration(self):
        model = tiny_model('gate')
        logits = model.forward_flow(PROMPT).per_step_logits[1]
        self.assertEqual(model.greedy_decode(PROMPT, 1, iteration=2)[0, 0].item(), logits[0, -1].argmax().item())

    def test_iteration_out_of_range(self):
        with self.assertRaises(LatentStateError):
            tiny_model().greedy_decode(PROMPT, 1, iteration=4)


class TestBackbone(SimpleTestCase):
    def test_zero_initialised_xattn_reproduces_the_backbone(self):
        backbone = tiny_model('init', num_iterations=1, seed=5)
        student = FlowTransformer.from_backbone(backbone, 3, 'xattn', 'case2', seed=5)
        expected = backbone.forward_flow(PROMPT).final_logits
        for logits in student.forward_flow(PROMPT).per_step_logits:
            self.assertTrue(torch.equal(logits, expected))

    def test_parameter_groups(self):
        model = FlowTransformer.from_backbone(tiny_model(num_iterations=1), 2, 'catproj')
        pretrained, new = model.parameter_groups()
        self.assertEqual(sum(p.numel() for p in new), 3 * 8 * 8 + 2 * 8)
        self.assertTrue(all(name.startswith('retrospective.') for name in model.new_parameter_names()))
        self.assertEqual(len(pretrained) + len(new), len(list(model.parameters())))


class TestCheckpoints(SimpleTestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_round_trip(self):
        model = tiny_model('xattn', seed=2)
        path = os.path.join(self.directory, 'model.pt')
        checksum = save_checkpoint(model, path, metadata={'mode': 'scout'})
        checkpoint = load_checkpoint(path)
        self.assertEqual(checkpoint.checksum, checksum)
        self.assertEqual(checkpoint.metadata, {'mode': 'scout'})
        self.assertFalse(checkpoint.frozen)
        self.assertTrue(torch.equal(checkpoint.model.forward_flow(PROMPT).final_logits,
                                    model.forward_flow(PROMPT).final_logits))

    def test_frozen_flag(self):
        path = os.path.join(self.directory, 'teacher.pt')
        save_checkpoint(tiny_model(num_iterations=1), path, frozen=True)
        checkpoint = load_checkpoint(path)
        self.assertTrue(checkpoint.frozen)
        self.assertFalse(any(p.requires_grad for p in checkpoint.model.parameters()))

    def test_checksum_tracks_parameters(self):
        model = tiny_model()
        before = model_checksum(model)
        with torch.no_grad():
            model.output_projection.bias[0] += 1.0
        self.assertNotEqual(model_checksum(model), before)

    def test_not_a_checkpoint(self):
        path = os.path.join(self.directory, 'junk.pt')
        with open(path, 'wb') as junk:
            junk.write(b'not a checkpoint')
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_tampered_parameters(self):
        path = os.path.join(self.directory, 'model.pt')
        save_checkpoint(tiny_model(), path)
        payload = torch.load(path, weights_only=True)
        payload['parameters']['output_projection.bias'][0] += 1.0
        torch.save(payload, path)
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)
