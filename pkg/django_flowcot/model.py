"""The partitioned decoder: head block, recursive block and tail block.

``encode_head`` embeds the tokens and runs the head layers once, producing z0.
``recursive_step`` applies the shared recursive layers, merging in the previous
latent state from the second iteration on, and ``decode_tail`` maps any latent
state to logits with the same tail weights.
"""
import hashlib
import json
import logging
import math
import pickle
from dataclasses import asdict, dataclass, replace
from enum import Enum

import torch
from torch import nn

from . import numerics
from .exceptions import CheckpointError, ConfigError, LatentStateError, ShapeError, TokenRangeError
from .latent import LatentState, StepOutputs
from .retrospective import MechanismKind, build_integration, integrate, xattn_sublayer
from .seeding import make_generator

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'django-flowcot-checkpoint'
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig(object):
    vocab_size: int
    model_dim: int = 32
    num_heads: int = 4
    num_layers: int = 4
    max_seq_len: int = 32
    num_iterations: int = 3
    ffn_multiplier: int = 4

    def __post_init__(self):
        for name in ('vocab_size', 'model_dim', 'num_heads', 'num_layers', 'max_seq_len', 'num_iterations',
                     'ffn_multiplier'):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(u'must be a positive integer, got {value!r}'.format(value=value),
                                  path='model.{name}'.format(name=name))
        if self.model_dim % self.num_heads:
            raise ConfigError(u'model_dim {dim} is not divisible by num_heads {heads}'.format(
                dim=self.model_dim, heads=self.num_heads), path='model.num_heads')


class PartitionCase(str, Enum):
    CASE1 = 'case1'
    CASE2 = 'case2'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(u'unknown partition case "{value}", valid cases are: case1, case2'.format(value=value),
                              path='partition.case')


@dataclass(frozen=True)
class PartitionSpec(object):
    """Which transformer layers belong to the head, recursive and tail blocks.

    The embedding always sits in the head and the output projection in the tail.
    """

    head_layers: range
    recursive_layers: range
    tail_layers: range
    case: PartitionCase = PartitionCase.CASE2
    head_includes_embedding: bool = True
    tail_includes_projection: bool = True

    def __post_init__(self):
        if not len(self.recursive_layers):
            raise ConfigError(u'the recursive block needs at least one layer', path='partition')
        if (self.head_layers.start != 0 or self.head_layers.stop != self.recursive_layers.start or
                self.recursive_layers.stop != self.tail_layers.start):
            raise ConfigError(u'head, recursive and tail layers must be contiguous and disjoint', path='partition')

    @property
    def num_layers(self):
        return self.tail_layers.stop

    def to_dict(self):
        return {
            'head_layers': [self.head_layers.start, self.head_layers.stop],
            'recursive_layers': [self.recursive_layers.start, self.recursive_layers.stop],
            'tail_layers': [self.tail_layers.start, self.tail_layers.stop],
            'case': self.case.value,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(head_layers=range(*data['head_layers']), recursive_layers=range(*data['recursive_layers']),
                   tail_layers=range(*data['tail_layers']), case=PartitionCase.parse(data['case']))


def partition_model(config, case=PartitionCase.CASE2):
    case = PartitionCase.parse(case)
    total = config.num_layers
    if total < 2:
        raise ConfigError(u'partitioning needs at least 2 layers, got {total}'.format(total=total),
                          path='model.num_layers')
    if case is PartitionCase.CASE2:
        head = int(math.ceil(total / 2.0))
        recursive = total - head
    else:
        head = int(math.ceil(total / 3.0))
        recursive = int(math.ceil((total - head) / 2.0))
    return PartitionSpec(head_layers=range(0, head), recursive_layers=range(head, head + recursive),
                         tail_layers=range(head + recursive, total), case=case)


class LayerNorm(nn.Module):
    def __init__(self, dim):
        super(LayerNorm, self).__init__()
        self.weight = nn.Parameter(torch.ones(dim, dtype=numerics.DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=numerics.DTYPE))

    def reset_parameters(self):
        with torch.no_grad():
            self.weight.fill_(1.0)
            self.bias.zero_()

    def forward(self, x):
        return numerics.layer_norm(x, self.weight, self.bias)


class SelfAttention(nn.Module):
    def __init__(self, model_dim, num_heads):
        super(SelfAttention, self).__init__()
        self.num_heads = num_heads
        self.query = nn.Linear(model_dim, model_dim, dtype=numerics.DTYPE)
        self.key = nn.Linear(model_dim, model_dim, dtype=numerics.DTYPE)
        self.value = nn.Linear(model_dim, model_dim, dtype=numerics.DTYPE)
        self.output = nn.Linear(model_dim, model_dim, dtype=numerics.DTYPE)

    def forward(self, x):
        attended = numerics.attention(self.query(x), self.key(x), self.value(x), num_heads=self.num_heads,
                                      causal=True)
        return self.output(attended)


class FeedForward(nn.Module):
    def __init__(self, model_dim, multiplier):
        super(FeedForward, self).__init__()
        self.fc_in = nn.Linear(model_dim, model_dim * multiplier, dtype=numerics.DTYPE)
        self.fc_out = nn.Linear(model_dim * multiplier, model_dim, dtype=numerics.DTYPE)

    def forward(self, x):
        return numerics.feed_forward(x, self.fc_in.weight, self.fc_in.bias, self.fc_out.weight, self.fc_out.bias)


class DecoderLayer(nn.Module):
    """Post-norm decoder layer with an optional cross-attention sub-layer after self-attention."""

    def __init__(self, config):
        super(DecoderLayer, self).__init__()
        self.attention = SelfAttention(config.model_dim, config.num_heads)
        self.attention_norm = LayerNorm(config.model_dim)
        self.feed_forward = FeedForward(config.model_dim, config.ffn_multiplier)
        self.feed_forward_norm = LayerNorm(config.model_dim)

    def forward(self, x, memory=None, cross_attention=None):
        x = self.attention_norm(x + self.attention(x))
        if memory is not None and cross_attention is not None:
            x = xattn_sublayer(x, memory, cross_attention)
        return self.feed_forward_norm(x + self.feed_forward(x))


class FlowTransformer(nn.Module):
    """Decoder transformer that refines a latent state over ``config.num_iterations`` steps.

    With ``num_iterations=1`` this is a plain stacked decoder, which is how the
    backbone and the teachers are built.
    """

    def __init__(self, config, partition=None, mechanism=MechanismKind.INIT, seed=0):
        super(FlowTransformer, self).__init__()
        self.config = config
        self.partition = partition or partition_model(config)
        if self.partition.num_layers != config.num_layers:
            raise ConfigError(u'partition covers {covered} layers but the model has {total}'.format(
                covered=self.partition.num_layers, total=config.num_layers), path='partition')
        self.mechanism = MechanismKind.parse(mechanism)
        self.seed = seed
        self.token_embedding = nn.Embedding(config.vocab_size, config.model_dim, dtype=numerics.DTYPE)
        self.position_embedding = nn.Embedding(config.max_seq_len, config.model_dim, dtype=numerics.DTYPE)
        self.layers = nn.ModuleList([DecoderLayer(config) for _ in range(config.num_layers)])
        self.output_projection = nn.Linear(config.model_dim, config.vocab_size, dtype=numerics.DTYPE)
        self.retrospective = build_integration(self.mechanism, config.model_dim, config.num_heads,
                                               len(self.partition.recursive_layers))
        self.head_calls = 0
        self.reset_parameters(seed)

    def reset_parameters(self, seed):
        generator = make_generator(seed, 'init')
        for name, module in self.named_modules():
            if name.startswith('retrospective'):
                continue
            if isinstance(module, nn.Linear):
                numerics.init_linear_(module, generator)
            elif isinstance(module, nn.Embedding):
                numerics.normal_init_(module.weight, generator)
            elif isinstance(module, LayerNorm):
                module.reset_parameters()
        self.retrospective.reset_parameters(make_generator(seed, 'retrospective'))

    def check_tokens(self, x):
        tokens = torch.as_tensor(x, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.dim() != 2:
            raise ShapeError(u'tokens must be (length,) or (batch, length), got shape {shape}'.format(
                shape=tuple(tokens.shape)))
        length = tokens.shape[1]
        if length == 0:
            raise ShapeError(u'cannot encode an empty sequence')
        if length > self.config.max_seq_len:
            raise ShapeError(u'sequence length {length} exceeds max_seq_len {limit}'.format(
                length=length, limit=self.config.max_seq_len))
        if tokens.numel() and (tokens.min().item() < 0 or tokens.max().item() >= self.config.vocab_size):
            raise TokenRangeError(u'token ids must lie in [0, {size})'.format(size=self.config.vocab_size))
        return tokens

    def encode_head(self, x):
        tokens = self.check_tokens(x)
        self.head_calls += 1
        positions = torch.arange(tokens.shape[1])
        hidden = self.token_embedding(tokens) + self.position_embedding(positions)
        for index in self.partition.head_layers:
            hidden = self.layers[index](hidden)
        return LatentState(hidden, 0)

    def recursive_step(self, z0, z_prev=None):
        if z0.iteration_index != 0:
            raise LatentStateError(u'z0 must be the head output (iteration 0), got iteration {index}'.format(
                index=z0.iteration_index))
        memory = None
        if z_prev is None:
            hidden = z0.values
            index = 1
        else:
            if z_prev.values.shape != z0.values.shape:
                raise ShapeError(u'previous state {prev} does not match z0 {z0}'.format(
                    prev=tuple(z_prev.values.shape), z0=tuple(z0.values.shape)))
            index = z_prev.iteration_index + 1
            if self.mechanism is MechanismKind.XATTN:
                hidden = z0.values
                memory = z_prev.values
            else:
                hidden = integrate(self.mechanism, z0, z_prev, self.retrospective).values
        if index > self.config.num_iterations:
            raise LatentStateError(u'iteration {index} exceeds the configured {total} iterations'.format(
                index=index, total=self.config.num_iterations))
        for position, layer_index in enumerate(self.partition.recursive_layers):
            cross_attention = self.retrospective[position] if memory is not None else None
            hidden = self.layers[layer_index](hidden, memory, cross_attention)
        return LatentState(hidden, index)

    def decode_tail(self, z):
        hidden = numerics.check_finite(z.values, 'latent state')
        for index in self.partition.tail_layers:
            hidden = self.layers[index](hidden)
        return self.output_projection(hidden)

    def forward_flow(self, x):
        z0 = self.encode_head(x)
        states, logits = [], []
        state = None
        for _ in range(self.config.num_iterations):
            state = self.recursive_step(z0, state)
            states.append(state)
            logits.append(self.decode_tail(state))
        return StepOutputs(logits, states)

    forward = forward_flow

    @torch.no_grad()
    def greedy_decode(self, prompt, num_tokens, iteration=None):
        """Greedily extend ``prompt`` by ``num_tokens`` tokens using the logits of one iteration (1-based)."""
        iteration = self.config.num_iterations if iteration is None else iteration
        if not 1 <= iteration <= self.config.num_iterations:
            raise LatentStateError(u'iteration must lie in [1, {total}]'.format(total=self.config.num_iterations))
        tokens = self.check_tokens(prompt)
        for _ in range(num_tokens):
            logits = self.forward_flow(tokens).per_step_logits[iteration - 1]
            tokens = torch.cat([tokens, logits[:, -1].argmax(-1, keepdim=True)], dim=1)
        return tokens[:, tokens.shape[1] - num_tokens:]

    def new_parameter_names(self):
        return [name for name, _ in self.named_parameters() if name.startswith('retrospective.')]

    def parameter_groups(self):
        """Split trainable parameters into the pretrained stack and the newly introduced retrospective ones."""
        pretrained, new = [], []
        for name, parameter in self.named_parameters():
            if not parameter.requires_grad:
                continue
            (new if name.startswith('retrospective.') else pretrained).append(parameter)
        return pretrained, new

    def num_parameters(self):
        return sum(parameter.numel() for parameter in self.parameters())

    @classmethod
    def from_backbone(cls, backbone, num_iterations, mechanism, case=PartitionCase.CASE2, seed=0):
        """Wrap a pretrained stack for recursive fine-tuning; retrospective parameters start fresh."""
        config = replace(backbone.config, num_iterations=num_iterations)
        model = cls(config, partition_model(config, case), mechanism, seed)
        missing, unexpected = model.load_state_dict(backbone.state_dict(), strict=False)
        if unexpected or any(not name.startswith('retrospective.') for name in missing):
            raise CheckpointError(u'backbone parameters do not fit the model (missing {missing}, unexpected '
                                  u'{unexpected})'.format(missing=missing, unexpected=unexpected))
        return model


def freeze(model):
    model.requires_grad_(False)
    model.eval()
    return model


def is_frozen(model):
    return not any(parameter.requires_grad for parameter in model.parameters())


def _header(model):
    return {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'config': asdict(model.config),
        'partition': model.partition.to_dict(),
        'mechanism': model.mechanism.value,
    }


def model_checksum(model):
    """sha256 over the model description and every named parameter tensor."""
    digest = hashlib.sha256(json.dumps(_header(model), sort_keys=True).encode('utf-8'))
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode('utf-8'))
        digest.update(repr(tuple(tensor.shape)).encode('utf-8'))
        digest.update(tensor.detach().contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class Checkpoint(object):
    model: FlowTransformer
    frozen: bool
    metadata: dict
    checksum: str


def save_checkpoint(model, path, frozen=False, metadata=None):
    payload = dict(_header(model))
    payload.update({
        'frozen': bool(frozen),
        'metadata': dict(metadata or {}),
        'checksum': model_checksum(model),
        'shapes': {name: list(tensor.shape) for name, tensor in model.state_dict().items()},
        'parameters': {name: tensor.detach().clone() for name, tensor in model.state_dict().items()},
    })
    torch.save(payload, str(path))
    logger.debug('saved checkpoint %s (%s)', path, payload['checksum'][:12])
    return payload['checksum']


def load_checkpoint(path):
    try:
        payload = torch.load(str(path), map_location='cpu', weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as e:
        raise CheckpointError(u'cannot read checkpoint {path}: {error}'.format(path=path, error=e))
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(u'{path} is not a django-flowcot checkpoint'.format(path=path))
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(u'{path} has unsupported checkpoint version {version}'.format(
            path=path, version=payload.get('version')))
    config = ModelConfig(**payload['config'])
    model = FlowTransformer(config, PartitionSpec.from_dict(payload['partition']), payload['mechanism'])
    for name, shape in payload['shapes'].items():
        if list(payload['parameters'][name].shape) != shape:
            raise CheckpointError(u'parameter {name} in {path} has the wrong shape'.format(name=name, path=path))
    model.load_state_dict(payload['parameters'])
    if payload['frozen']:
        freeze(model)
    checksum = model_checksum(model)
    if checksum != payload['checksum']:
        raise CheckpointError(u'checksum mismatch in {path}'.format(path=path))
    return Checkpoint(model=model, frozen=payload['frozen'], metadata=payload['metadata'], checksum=checksum)
