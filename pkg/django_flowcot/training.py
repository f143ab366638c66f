"""Supervision plans, the per-iteration and total losses, and the training loop."""
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from . import numerics
from .exceptions import ConfigError, DivergenceError, EmptyMaskError, NonFiniteError, ShapeError
from .seeding import make_generator

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.5
WEIGHTED_DISTILL_WEIGHTS = (0.2, 0.3, 0.5)


class TrainingMode(str, Enum):
    SFT = 'sft'
    DSFT = 'dsft'
    R_SFT = 'r_sft'
    R_DISTILL_EQ = 'r_distill_eq'
    R_DISTILL_WT = 'r_distill_wt'
    R_SCOUT = 'r_scout'
    SCOUT = 'scout'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace('-', '_'))
        except ValueError:
            raise ConfigError(u'unknown mode "{value}", valid modes are: {valid}'.format(
                value=value, valid=', '.join(mode.value for mode in cls)), path='plan.mode')

    @property
    def recursive(self):
        return self not in (TrainingMode.SFT, TrainingMode.DSFT)

    @property
    def uses_teachers(self):
        return self not in (TrainingMode.SFT, TrainingMode.R_SFT)


class Divergence(str, Enum):
    FORWARD = 'forward'
    ADAPTIVE = 'adaptive'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(u'unknown divergence "{value}", valid values are: forward, adaptive'.format(
                value=value), path='plan.divergence')


@dataclass(frozen=True)
class StepSupervision(object):
    teacher_id: Optional[int]
    weight: float
    alpha: float


@dataclass(frozen=True)
class SupervisionPlan(object):
    """Teacher, loss weight and hard-label mix for every supervised iteration.

    Non-recursive modes carry a single entry applied to the final decoding.
    """

    mode: TrainingMode
    steps: Tuple[StepSupervision, ...]
    divergence: Divergence = Divergence.FORWARD

    def __post_init__(self):
        if not self.steps:
            raise ConfigError(u'a plan needs at least one supervised iteration', path='plan')
        if not self.mode.recursive and len(self.steps) != 1:
            raise ConfigError(u'{mode} supervises the final output only'.format(mode=self.mode.value), path='plan')
        for step in self.steps:
            if step.weight < 0 or step.alpha < 0:
                raise ConfigError(u'weights and alpha must be nonnegative', path='plan.weights')
        if all(step.weight == 0 for step in self.steps):
            raise ConfigError(u'at least one loss weight must be positive', path='plan.weights')

    @property
    def final_only(self):
        return not self.mode.recursive

    @property
    def model_iterations(self):
        return 1 if self.final_only else len(self.steps)

    @property
    def teacher_ids(self):
        return sorted(set(step.teacher_id for step in self.steps if step.teacher_id is not None))

    @property
    def weights(self):
        return tuple(step.weight for step in self.steps)


def _default_weights(mode, num_iterations):
    if mode is TrainingMode.R_DISTILL_WT:
        if num_iterations == len(WEIGHTED_DISTILL_WEIGHTS):
            return WEIGHTED_DISTILL_WEIGHTS
        total = num_iterations * (num_iterations + 1) / 2.0
        return tuple((t + 1) / total for t in range(num_iterations))
    return tuple(1.0 / num_iterations for _ in range(num_iterations))


def make_plan(mode, ladder, num_iterations, alpha=DEFAULT_ALPHA, weights=None, divergence=Divergence.FORWARD):
    mode = TrainingMode.parse(mode)
    divergence = Divergence.parse(divergence)
    if num_iterations < 1:
        raise ConfigError(u'num_iterations must be positive', path='model.num_iterations')
    if mode.uses_teachers and (ladder is None or not len(ladder)):
        raise ConfigError(u'{mode} needs a teacher ladder'.format(mode=mode.value), path='plan.mode')
    strongest = len(ladder) - 1 if ladder is not None and len(ladder) else None

    if mode is TrainingMode.SFT:
        return SupervisionPlan(mode, (StepSupervision(None, 1.0, 1.0),), divergence)
    if mode is TrainingMode.DSFT:
        return SupervisionPlan(mode, (StepSupervision(strongest, 1.0, alpha),), divergence)

    weights = tuple(weights) if weights is not None else _default_weights(mode, num_iterations)
    if len(weights) != num_iterations:
        raise ConfigError(u'expected {expected} weights, got {got}'.format(expected=num_iterations, got=len(weights)),
                          path='plan.weights')
    if mode is TrainingMode.R_SFT:
        teachers = [None] * num_iterations
        alphas = [1.0] * num_iterations
    else:
        alphas = [alpha] * num_iterations
        if mode in (TrainingMode.R_DISTILL_EQ, TrainingMode.R_DISTILL_WT):
            teachers = [strongest] * num_iterations
        else:
            if len(ladder) < num_iterations:
                raise ConfigError(u'{mode} needs {needed} teachers, the ladder has {have}'.format(
                    mode=mode.value, needed=num_iterations, have=len(ladder)), path='ladder.teachers')
            teachers = list(range(len(ladder) - num_iterations, len(ladder)))
            if mode is TrainingMode.R_SCOUT:
                teachers.reverse()
    steps = tuple(StepSupervision(teacher, weight, a) for teacher, weight, a in zip(teachers, weights, alphas))
    return SupervisionPlan(mode, steps, divergence)


@dataclass
class LossBreakdown(object):
    total: torch.Tensor
    kl: Optional[torch.Tensor]
    ce: torch.Tensor


def per_step_loss(p, q, batch, alpha, divergence=Divergence.FORWARD):
    """KL(q || p) + alpha * CE(p, y*) over the batch's supervised positions; KL is dropped when q is None."""
    batch.check_mask()
    ce = numerics.cross_entropy(p, batch.targets, batch.mask)
    if q is None:
        return LossBreakdown(total=alpha * ce, kl=None, ce=ce)
    if Divergence.parse(divergence) is Divergence.ADAPTIVE:
        kl = numerics.adaptive_kl(q, p, batch.mask)
    else:
        kl = numerics.kl_divergence(q, p, batch.mask)
    total = kl + alpha * ce if alpha else kl
    return LossBreakdown(total=total, kl=kl, ce=ce)


def total_loss(outputs, plan, batch, ladder=None, soft_targets=None):
    """Weighted sum of per-step losses; returns the total and one breakdown per supervised step.

    ``soft_targets`` may map teacher ids to precomputed distributions for this batch.
    """
    if all(step.weight == 0 for step in plan.steps):
        raise ConfigError(u'at least one loss weight must be positive', path='plan.weights')
    logits = outputs.per_step_logits
    if plan.final_only:
        supervised = [(plan.steps[0], logits[-1])]
    else:
        if len(plan.steps) != len(logits):
            raise ShapeError(u'plan supervises {plan} iterations but the model produced {got}'.format(
                plan=len(plan.steps), got=len(logits)))
        supervised = list(zip(plan.steps, logits))
    soft_targets = soft_targets or {}
    total = None
    breakdowns = []
    for step, step_logits in supervised:
        p = numerics.softmax(step_logits)
        q = None
        if step.teacher_id is not None:
            if step.teacher_id in soft_targets:
                q = soft_targets[step.teacher_id]
            elif ladder is None:
                raise ConfigError(u'the plan uses teachers but no ladder was given', path='ladder')
            else:
                q = ladder.soft_targets(step.teacher_id, batch.inputs, p.support_size)
        breakdown = per_step_loss(p, q, batch, step.alpha, plan.divergence)
        weighted = step.weight * breakdown.total
        total = weighted if total is None else total + weighted
        breakdowns.append(breakdown)
    return total, breakdowns


@dataclass(frozen=True)
class OptimizerSchedule(object):
    """Two learning-rate groups, linear warmup then cosine decay to zero."""

    lr_pretrained: float = 2e-5
    lr_new: Optional[float] = None
    warmup_fraction: float = 0.1
    total_steps: int = 0
    schedule_shape: str = 'cosine'
    weight_decay: float = 0.01
    effective_batch_size: int = 128
    micro_batch_size: int = 32

    def __post_init__(self):
        if self.lr_pretrained < 0 or (self.lr_new is not None and self.lr_new < 0):
            raise ConfigError(u'learning rates must be nonnegative', path='optimizer.lr_pretrained')
        if not 0 <= self.warmup_fraction <= 1:
            raise ConfigError(u'must lie in [0, 1]', path='optimizer.warmup_fraction')
        if self.total_steps < 0:
            raise ConfigError(u'must be nonnegative', path='optimizer.total_steps')
        if self.schedule_shape != 'cosine':
            raise ConfigError(u'only the cosine schedule is supported', path='optimizer.schedule_shape')
        if self.micro_batch_size < 1 or self.effective_batch_size < self.micro_batch_size:
            raise ConfigError(u'need 1 <= micro_batch_size <= effective_batch_size',
                              path='optimizer.micro_batch_size')
        if self.effective_batch_size % self.micro_batch_size:
            raise ConfigError(u'effective_batch_size must be a multiple of micro_batch_size',
                              path='optimizer.effective_batch_size')

    @property
    def new_rate(self):
        return 2 * self.lr_pretrained if self.lr_new is None else self.lr_new

    @property
    def warmup_steps(self):
        return int(round(self.warmup_fraction * self.total_steps))

    @property
    def accumulation_steps(self):
        return self.effective_batch_size // self.micro_batch_size

    def multiplier(self, step):
        warmup = self.warmup_steps
        if step < warmup:
            return step / float(warmup)
        if self.total_steps <= warmup:
            return 1.0
        progress = min(1.0, (step - warmup) / float(self.total_steps - warmup))
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    def learning_rate(self, step, group='pretrained'):
        base = self.new_rate if group == 'new' else self.lr_pretrained
        return base * self.multiplier(step)


def build_optimizer(model, schedule):
    pretrained, new = model.parameter_groups()
    groups = [{'params': pretrained, 'lr': schedule.lr_pretrained, 'name': 'pretrained'}]
    if new:
        groups.append({'params': new, 'lr': schedule.new_rate, 'name': 'new'})
    optimizer = AdamW(groups, lr=schedule.lr_pretrained, weight_decay=schedule.weight_decay)
    scheduler = LambdaLR(optimizer, schedule.multiplier)
    return optimizer, scheduler


class TrainingLog(object):
    """Line-delimited JSON records, one per optimizer step."""

    def __init__(self, path):
        self.path = path
        open(str(path), 'w').close()

    def append(self, record):
        with open(str(self.path), 'a') as log_file:
            log_file.write(json.dumps(record, sort_keys=True) + '\n')


def read_training_log(path):
    with open(str(path)) as log_file:
        return [json.loads(line) for line in log_file if line.strip()]


@dataclass
class TrainResult(object):
    model: object
    trajectory: list = field(default_factory=list)


def _micro_batches(size, batch_size, generator):
    while True:
        order = torch.randperm(size, generator=generator)
        for start in range(0, size, batch_size):
            yield order[start:start + batch_size]


def _summarise(breakdowns):
    return {
        'kl': [None if b.kl is None else b.kl.item() for b in breakdowns],
        'ce': [b.ce.item() for b in breakdowns],
    }


def _accumulate(running, values, share):
    if running is None:
        running = [None if value is None else 0.0 for value in values]
    return [None if value is None else total + value * share for total, value in zip(running, values)]


def accumulate_gradients(model, plan, dataset, micro_batches, ladder=None, tables=None, step=None, seed=None):
    """Backpropagate one effective batch given as micro-batches of dataset indices.

    Every micro-batch loss is weighted by its share of the supervised positions,
    so the accumulated gradient is the gradient of the per-position mean over the
    whole effective batch, however unevenly the micro-batches are sized. Returns
    the weighted total and the weighted per-step KL and CE values.
    """
    tables = tables or {}
    batches = [(indices, dataset.batch(indices)) for indices in micro_batches]
    supervised = float(sum(int(batch.mask.sum().item()) for _, batch in batches))
    if not supervised:
        raise EmptyMaskError(u'the effective batch has no supervised positions')
    kl_sum, ce_sum, total_sum = None, None, 0.0
    for indices, batch in batches:
        share = batch.mask.sum().item() / supervised
        targets = {teacher_id: numerics.Distribution(table[indices]) for teacher_id, table in tables.items()}
        try:
            outputs = model.forward_flow(batch.inputs)
            loss, breakdowns = total_loss(outputs, plan, batch, ladder, targets)
        except NonFiniteError as e:
            raise DivergenceError(u'non-finite logits at step {step} (seed {seed}): {error}'.format(
                step=step, seed=seed, error=e), step=step, seed=seed)
        summary = _summarise(breakdowns)
        if not math.isfinite(loss.item()):
            raise DivergenceError(u'loss became {loss} at step {step} (seed {seed}); weights {weights}, '
                                  u'per-step {summary}'.format(loss=loss.item(), step=step, seed=seed,
                                                              weights=list(plan.weights), summary=summary),
                                  step=step, breakdown=summary, seed=seed)
        (loss * share).backward()
        total_sum += loss.item() * share
        kl_sum = _accumulate(kl_sum, summary['kl'], share)
        ce_sum = _accumulate(ce_sum, summary['ce'], share)
    return total_sum, kl_sum, ce_sum


def train(model, plan, dataset, schedule, seed, ladder=None, log_path=None, cache=None, check_frozen=False):
    """Fine-tune ``model`` under ``plan`` for ``schedule.total_steps`` optimizer steps.

    Each optimizer step accumulates gradients over enough micro-batches to reach
    the effective batch size. Soft targets are computed once per teacher for the
    whole dataset (optionally through ``cache``).
    """
    if not plan.final_only and len(plan.steps) != model.config.num_iterations:
        raise ConfigError(u'plan supervises {plan} iterations but the model runs {model}'.format(
            plan=len(plan.steps), model=model.config.num_iterations), path='model.num_iterations')
    if plan.teacher_ids and ladder is None:
        raise ConfigError(u'{mode} needs a teacher ladder'.format(mode=plan.mode.value), path='ladder')
    if len(dataset) == 0:
        raise ConfigError(u'the training split is empty', path='data')
    vocab = model.config.vocab_size
    tables = {teacher_id: ladder.soft_target_table(teacher_id, dataset, vocab, cache=cache)
              for teacher_id in plan.teacher_ids}

    optimizer, scheduler = build_optimizer(model, schedule)
    batches = _micro_batches(len(dataset), schedule.micro_batch_size, make_generator(seed, 'data_order'))
    log = TrainingLog(log_path) if log_path else None
    accumulation = schedule.accumulation_steps
    trajectory = []
    for step in range(1, schedule.total_steps + 1):
        optimizer.zero_grad(set_to_none=True)
        rates = {group['name']: group['lr'] for group in optimizer.param_groups}
        micro_batches = [next(batches) for _ in range(accumulation)]
        total_sum, kl_sum, ce_sum = accumulate_gradients(model, plan, dataset, micro_batches, ladder, tables,
                                                         step=step, seed=seed)
        optimizer.step()
        scheduler.step()
        if check_frozen and ladder is not None:
            ladder.assert_frozen()
        record = {'step': step, 'ce': ce_sum, 'total': total_sum, 'lr': rates}
        if plan.teacher_ids:
            record['kl'] = kl_sum
        trajectory.append(record)
        if log is not None:
            log.append(record)
        logger.debug('step %d total %.6f', step, total_sum)
    return TrainResult(model=model, trajectory=trajectory)


def pretrain_backbone(model, dataset, schedule, seed, log_path=None):
    """Plain next-token training of the unpartitioned stack, the starting point for every fine-tuning mode."""
    if model.config.num_iterations != 1 or model.new_parameter_names():
        raise ConfigError(u'the backbone must run a single iteration without retrospective parameters',
                          path='model.num_iterations')
    plan = make_plan(TrainingMode.SFT, None, 1)
    return train(model, plan, dataset, schedule, seed, log_path=log_path)
