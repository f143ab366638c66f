from dataclasses import dataclass
from typing import List

import torch

from . import numerics
from .exceptions import LatentStateError


@dataclass(frozen=True)
class LatentState(object):
    """Hidden states after ``iteration_index`` refinements; values are (batch, length, model_dim)."""

    values: torch.Tensor
    iteration_index: int = 0

    def __post_init__(self):
        if self.values.dim() != 3:
            raise LatentStateError(u'latent values must be (batch, length, dim), got shape {shape}'.format(
                shape=tuple(self.values.shape)))
        if self.iteration_index < 0:
            raise LatentStateError(u'iteration index must be nonnegative')
        numerics.check_finite(self.values.detach(), u'latent state {index}'.format(index=self.iteration_index))

    @property
    def sequence_length(self):
        return self.values.shape[1]

    @property
    def model_dim(self):
        return self.values.shape[2]


@dataclass(frozen=True)
class StepOutputs(object):
    per_step_logits: List[torch.Tensor]
    per_step_states: List[LatentState]

    def __post_init__(self):
        if len(self.per_step_logits) != len(self.per_step_states):
            raise LatentStateError(u'one logit tensor is needed per latent state')

    @property
    def num_iterations(self):
        return len(self.per_step_logits)

    @property
    def final_logits(self):
        return self.per_step_logits[-1]
