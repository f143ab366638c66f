"""History integration: how the initial latent state and the previous one are merged.

Five mechanisms merge the two streams once, before the recursive block runs.
Cross-attention (``xattn``) instead adds a causal cross-attention sub-layer to
every recursive layer, with the previous state as its memory.
"""
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn

from . import numerics
from .exceptions import ConfigError, MechanismError, ShapeError
from .latent import LatentState


class MechanismKind(str, Enum):
    INIT = 'init'
    ADD = 'add'
    CATPROJ = 'catproj'
    GATE = 'gate'
    MODINJ = 'modinj'
    XATTN = 'xattn'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(u'unknown retrospective mechanism "{value}", valid mechanisms are: {valid}'.format(
                value=value, valid=', '.join(kind.value for kind in cls)), path='mechanism.kind')


def _linear(in_features, out_features):
    return nn.Linear(in_features, out_features, dtype=numerics.DTYPE)


class IntegrationModule(nn.Module):
    kind = None

    def reset_parameters(self, generator):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                numerics.init_linear_(module, generator)

    def forward(self, z0, z_prev):
        raise NotImplementedError


class InitInjection(IntegrationModule):
    kind = MechanismKind.INIT

    def forward(self, z0, z_prev):
        return z_prev


class AdditiveFusion(IntegrationModule):
    kind = MechanismKind.ADD

    def forward(self, z0, z_prev):
        return z0 + z_prev


class ConcatProject(IntegrationModule):
    kind = MechanismKind.CATPROJ

    def __init__(self, model_dim):
        super(ConcatProject, self).__init__()
        self.hidden = _linear(2 * model_dim, model_dim)
        self.output = _linear(model_dim, model_dim)

    def forward(self, z0, z_prev):
        return self.output(F.gelu(self.hidden(torch.cat([z0, z_prev], dim=-1))))


class GateControl(IntegrationModule):
    kind = MechanismKind.GATE

    def __init__(self, model_dim):
        super(GateControl, self).__init__()
        self.gate = _linear(2 * model_dim, model_dim)

    def forward(self, z0, z_prev):
        g = torch.sigmoid(self.gate(torch.cat([z0, z_prev], dim=-1)))
        return g * z_prev + (1 - g) * z0


class ModulatedInjection(IntegrationModule):
    """Normalised z0 with a per-position scale and shift predicted from z_prev."""

    kind = MechanismKind.MODINJ

    def __init__(self, model_dim):
        super(ModulatedInjection, self).__init__()
        self.modulation = _linear(model_dim, 2 * model_dim)

    def reset_parameters(self, generator):
        # unit scale, zero shift
        numerics.zero_linear_(self.modulation)

    def forward(self, z0, z_prev):
        scale, shift = self.modulation(z_prev).chunk(2, dim=-1)
        return numerics.layer_norm(z0) * (1 + scale) + shift


class CrossAttentionSublayer(nn.Module):
    def __init__(self, model_dim, num_heads):
        super(CrossAttentionSublayer, self).__init__()
        self.num_heads = num_heads
        self.memory_hidden = _linear(model_dim, model_dim)
        self.memory_output = _linear(model_dim, model_dim)
        self.query = _linear(model_dim, model_dim)
        self.key = _linear(model_dim, model_dim)
        self.value = _linear(model_dim, model_dim)
        self.output = _linear(model_dim, model_dim)

    def reset_parameters(self, generator):
        for module in (self.memory_hidden, self.memory_output, self.query, self.key, self.value):
            numerics.init_linear_(module, generator)
        numerics.zero_linear_(self.output)

    def forward(self, current, memory):
        projected = self.memory_output(F.gelu(self.memory_hidden(memory)))
        attended = numerics.attention(self.query(current), self.key(projected), self.value(projected),
                                      num_heads=self.num_heads, causal=True)
        return current + self.output(attended)


class CrossAttentionMemory(IntegrationModule):
    kind = MechanismKind.XATTN

    def __init__(self, model_dim, num_heads, num_layers):
        super(CrossAttentionMemory, self).__init__()
        self.sublayers = nn.ModuleList([CrossAttentionSublayer(model_dim, num_heads) for _ in range(num_layers)])

    def reset_parameters(self, generator):
        for sublayer in self.sublayers:
            sublayer.reset_parameters(generator)

    def __getitem__(self, index):
        return self.sublayers[index]

    def forward(self, z0, z_prev):
        raise MechanismError(u'xattn fuses inside each recursive layer, use xattn_sublayer')


def build_integration(kind, model_dim, num_heads, num_recursive_layers):
    kind = MechanismKind.parse(kind)
    if kind is MechanismKind.INIT:
        return InitInjection()
    if kind is MechanismKind.ADD:
        return AdditiveFusion()
    if kind is MechanismKind.CATPROJ:
        return ConcatProject(model_dim)
    if kind is MechanismKind.GATE:
        return GateControl(model_dim)
    if kind is MechanismKind.MODINJ:
        return ModulatedInjection(model_dim)
    return CrossAttentionMemory(model_dim, num_heads, num_recursive_layers)


def added_parameter_count(kind, model_dim, num_recursive_layers=1):
    """Number of parameters a mechanism adds on top of the plain stack."""
    kind = MechanismKind.parse(kind)
    d = model_dim
    counts = {
        MechanismKind.INIT: 0,
        MechanismKind.ADD: 0,
        MechanismKind.CATPROJ: 3 * d * d + 2 * d,
        MechanismKind.GATE: 2 * d * d + d,
        MechanismKind.MODINJ: 2 * d * d + 2 * d,
        MechanismKind.XATTN: num_recursive_layers * (6 * d * d + 6 * d),
    }
    return counts[kind]


def _check_lengths(a, b):
    if a.shape[:-1] != b.shape[:-1] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(u'states of shapes {a} and {b} cannot be merged'.format(a=tuple(a.shape), b=tuple(b.shape)))


def integrate(kind, z0, z_prev, params):
    """Merge z0 and z_prev with a stream-merging mechanism, giving the recursive block's input."""
    kind = MechanismKind.parse(kind)
    if kind is MechanismKind.XATTN:
        raise MechanismError(u'xattn fuses inside each recursive layer, use xattn_sublayer')
    if params.kind is not kind:
        raise MechanismError(u'parameters belong to {actual}, not {kind}'.format(actual=params.kind.value,
                                                                                 kind=kind.value))
    _check_lengths(z0.values, z_prev.values)
    return LatentState(params(z0.values, z_prev.values), z_prev.iteration_index)


def xattn_sublayer(current, memory, params):
    _check_lengths(current, memory)
    return params(current, memory)
