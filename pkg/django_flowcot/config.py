"""Run configuration: a YAML document of named sections.

Only ``model`` is mandatory. Unknown sections or keys are rejected with the
full field path, and ``dump_config(load_config(...))`` parses back to an equal
configuration.
"""
import hashlib
import json
import math
from typing import List, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .evaluation import EarlyStopPolicy
from .exceptions import ConfigError
from .model import ModelConfig, PartitionCase
from .retrospective import MechanismKind
from .tasks import SPLITS, TaskSpec
from .teachers import TeacherBudget, TeacherSpec
from .training import Divergence, OptimizerSchedule, TrainingMode


class Section(BaseModel):
    model_config = ConfigDict(extra='forbid', allow_inf_nan=False,
                              protected_namespaces=())


class ModelSection(Section):
    vocab_size: Optional[int] = None
    model_dim: int = 32
    num_heads: int = 4
    num_layers: int = 4
    max_seq_len: int = 32
    num_iterations: int = 3
    ffn_multiplier: int = 4


class PartitionSection(Section):
    case: str = 'case2'


class MechanismSection(Section):
    kind: str = 'xattn'


class PlanSection(Section):
    mode: str = 'scout'
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    weights: Optional[List[float]] = None
    divergence: str = 'forward'


class OptimizerSection(Section):
    lr_pretrained: float = 5e-4
    lr_new: Optional[float] = None
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    epochs: int = 10
    total_steps: Optional[int] = None
    effective_batch_size: int = 128
    micro_batch_size: int = 32


class DataSection(Section):
    task: str = 'modadd'
    modulus: int = 97
    num_digits: int = 2
    sequence_length: int = 6
    alphabet_size: int = 8
    train_fraction: float = 0.8
    dev_fraction: float = 0.1
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    train_seed: int = 0
    dev_seed: int = 1
    test_seed: int = 2


class SeedSection(Section):
    root: int = 0


class BudgetSection(Section):
    steps: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 64
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01

    def budget(self):
        return TeacherBudget(steps=self.steps, learning_rate=self.learning_rate, batch_size=self.batch_size,
                             warmup_fraction=self.warmup_fraction, weight_decay=self.weight_decay)


class PretrainSection(BudgetSection):
    pass


class TeacherEntry(Section):
    capacity_rank: int
    model_dim: int
    num_layers: int
    num_heads: int = 4
    vocab_size: Optional[int] = None


def _default_teachers():
    return [TeacherEntry(capacity_rank=1, model_dim=32, num_layers=2),
            TeacherEntry(capacity_rank=2, model_dim=64, num_layers=4),
            TeacherEntry(capacity_rank=3, model_dim=128, num_layers=6)]


class LadderSection(BudgetSection):
    teachers: List[TeacherEntry] = Field(default_factory=_default_teachers)


class TrainSection(Section):
    backbone: Optional[str] = None
    teachers_dir: Optional[str] = None
    cache_dir: Optional[str] = None


class EvalSection(Section):
    split: str = 'dev'
    checkpoint: Optional[str] = None
    baseline: Optional[str] = None
    early_stop: str = 'none'
    entropy_threshold: float = 0.1
    consistency_threshold: float = 0.01
    kl_ladder_prompts: int = 100


class HeatmapSection(Section):
    prompt: Optional[List[int]] = None
    candidates: List[int] = Field(default_factory=list)
    checkpoint: Optional[str] = None


class AblateSection(Section):
    mechanisms: List[str] = Field(default_factory=lambda: [kind.value for kind in MechanismKind])
    cases: List[str] = Field(default_factory=lambda: ['case2'])
    modes: List[str] = Field(default_factory=lambda: ['r_sft'])
    seeds: List[int] = Field(default_factory=lambda: [0])


class RunConfig(Section):
    model: ModelSection
    partition: PartitionSection = Field(default_factory=PartitionSection)
    mechanism: MechanismSection = Field(default_factory=MechanismSection)
    plan: PlanSection = Field(default_factory=PlanSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    data: DataSection = Field(default_factory=DataSection)
    seed: SeedSection = Field(default_factory=SeedSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    ladder: LadderSection = Field(default_factory=LadderSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    heatmap: HeatmapSection = Field(default_factory=HeatmapSection)
    ablate: AblateSection = Field(default_factory=AblateSection)

    @model_validator(mode='before')
    @classmethod
    def _shorthands(cls, data):
        if not isinstance(data, dict):
            return data
        # an empty section (``eval:``) means all defaults; ``seed: 3`` means ``seed: {root: 3}``
        data = {name: values for name, values in data.items() if values is not None or name == 'model'}
        if isinstance(data.get('seed'), int) and not isinstance(data['seed'], bool):
            data['seed'] = {'root': data['seed']}
        return data

    def task_spec(self):
        values = self.data.model_dump()
        values['name'] = values.pop('task')
        return TaskSpec(**values)

    def build_model_config(self, num_iterations=None):
        task = self.task_spec()
        values = self.model.model_dump()
        if values['vocab_size'] is None:
            values['vocab_size'] = task.vocab_size
        elif values['vocab_size'] < task.vocab_size:
            raise ConfigError(u'vocab_size {vocab} is smaller than the {task} vocabulary {need}'.format(
                vocab=values['vocab_size'], task=task.name, need=task.vocab_size), path='model.vocab_size')
        if values['max_seq_len'] < task.total_length:
            raise ConfigError(u'max_seq_len {length} cannot hold a {task} example of length {need}'.format(
                length=values['max_seq_len'], task=task.name, need=task.total_length), path='model.max_seq_len')
        if num_iterations is not None:
            values['num_iterations'] = num_iterations
        return ModelConfig(**values)

    @property
    def mode(self):
        return TrainingMode.parse(self.plan.mode)

    @property
    def mechanism_kind(self):
        return MechanismKind.parse(self.mechanism.kind)

    @property
    def partition_case(self):
        return PartitionCase.parse(self.partition.case)

    @property
    def divergence(self):
        return Divergence.parse(self.plan.divergence)

    def teacher_specs(self):
        vocab = self.task_spec().vocab_size
        return [TeacherSpec(capacity_rank=entry.capacity_rank, model_dim=entry.model_dim,
                            num_layers=entry.num_layers, num_heads=entry.num_heads,
                            vocab_size=entry.vocab_size or vocab, max_seq_len=self.model.max_seq_len)
                for entry in sorted(self.ladder.teachers, key=lambda entry: entry.capacity_rank)]

    def schedule(self, num_examples):
        """Optimizer schedule for a training split of ``num_examples``; epochs fix the step count when unset."""
        section = self.optimizer
        total_steps = section.total_steps
        if total_steps is None:
            total_steps = int(math.ceil(section.epochs * num_examples / float(section.effective_batch_size)))
        return OptimizerSchedule(lr_pretrained=section.lr_pretrained, lr_new=section.lr_new,
                                 warmup_fraction=section.warmup_fraction, total_steps=total_steps,
                                 weight_decay=section.weight_decay,
                                 effective_batch_size=section.effective_batch_size,
                                 micro_batch_size=section.micro_batch_size)

    def early_stop_policy(self):
        kind = self.eval.early_stop
        threshold = {'entropy': self.eval.entropy_threshold,
                     'consistency': self.eval.consistency_threshold}.get(kind)
        return EarlyStopPolicy(kind=kind, threshold=threshold)

    def with_seed(self, seed):
        return self.model_copy(update={'seed': SeedSection(root=int(seed))})

    def with_changes(self, **sections):
        """Copy with some section fields replaced, e.g. ``with_changes(mechanism={'kind': 'add'})``."""
        data = self.to_dict()
        for name, values in sections.items():
            data[name].update(values)
        return parse_config(data)

    def to_dict(self):
        return self.model_dump()

    def checksum(self):
        return config_checksum(self)


def _validate(config):
    config.task_spec()
    config.build_model_config()
    mode = config.mode
    config.mechanism_kind
    config.partition_case
    config.divergence
    config.early_stop_policy()
    weights = config.plan.weights
    if weights is not None:
        if mode.recursive and len(weights) != config.model.num_iterations:
            raise ConfigError(u'expected {expected} weights, got {got}'.format(
                expected=config.model.num_iterations, got=len(weights)), path='plan.weights')
        if any(weight < 0 for weight in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError(u'weights must be nonnegative and sum to 1', path='plan.weights')
    ranks = [entry.capacity_rank for entry in config.ladder.teachers]
    if len(set(ranks)) != len(ranks):
        raise ConfigError(u'duplicate capacity ranks {ranks}'.format(ranks=sorted(ranks)), path='ladder.teachers')
    config.teacher_specs()
    if config.eval.split not in SPLITS:
        raise ConfigError(u'unknown split "{split}", valid splits are: {valid}'.format(
            split=config.eval.split, valid=', '.join(SPLITS)), path='eval.split')
    for kind in config.ablate.mechanisms:
        MechanismKind.parse(kind)
    for case in config.ablate.cases:
        PartitionCase.parse(case)
    for name in config.ablate.modes:
        TrainingMode.parse(name)
    if not (config.ablate.mechanisms and config.ablate.cases and config.ablate.modes and config.ablate.seeds):
        raise ConfigError(u'every ablation axis needs at least one value', path='ablate')
    return config


def _field_names(location):
    """Valid keys of the section found at ``location`` (a pydantic error location)."""
    model = RunConfig
    for part in location:
        if isinstance(part, int):
            continue
        annotation = model.model_fields[part].annotation
        for candidate in (annotation,) + getattr(annotation, '__args__', ()):
            if isinstance(candidate, type) and issubclass(candidate, BaseModel):
                model = candidate
                break
        else:
            break
    return list(model.model_fields)


def _error_path(location):
    path = ''
    for part in location:
        if isinstance(part, int):
            path += '[{index}]'.format(index=part)
        else:
            path += '.{name}'.format(name=part) if path else str(part)
    return path


def _config_error(error):
    first = error.errors()[0]
    location = tuple(first['loc'])
    if first['type'] == 'extra_forbidden':
        message = u'unknown key, valid keys are: {valid}'.format(valid=', '.join(_field_names(location[:-1])))
    elif first['type'] == 'missing':
        message = u'missing required key'
    else:
        message = first['msg']
    return ConfigError(message, path=_error_path(location))


def parse_config(data):
    """Build a validated RunConfig from a mapping (as loaded from YAML)."""
    if not isinstance(data, dict):
        raise ConfigError(u'the configuration must be a mapping of sections')
    if data.get('model') is None:
        raise ConfigError(u'missing required section [model]', path='model')
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise _config_error(e)
    return _validate(config)


def loads_config(text):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(u'invalid YAML: {error}'.format(error=e))
    return parse_config(data)


def load_config(path):
    try:
        with open(str(path)) as config_file:
            text = config_file.read()
    except OSError as e:
        raise ConfigError(u'cannot read configuration {path}: {error}'.format(path=path, error=e))
    return loads_config(text)


def dump_config(config):
    return yaml.safe_dump(config.to_dict(), default_flow_style=False, sort_keys=True)


def config_checksum(config):
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def section_checksum(config, *names):
    """Checksum of the named sections only."""
    data = config.to_dict()
    canonical = json.dumps({name: data[name] for name in names}, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
