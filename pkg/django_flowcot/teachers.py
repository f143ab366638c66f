"""The teacher ladder: frozen models of increasing capacity that supply soft targets."""
import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import numerics
from .exceptions import CacheError, ConfigError, DivergenceError, EmptySampleError, SupportMismatchError
from .model import FlowTransformer, ModelConfig, freeze, is_frozen, model_checksum
from .tasks import build_dataset
from .training import OptimizerSchedule, pretrain_backbone

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TeacherSpec(object):
    capacity_rank: int
    model_dim: int
    num_layers: int
    vocab_size: int
    num_heads: int = 4
    max_seq_len: int = 32

    def __post_init__(self):
        if self.capacity_rank < 1:
            raise ConfigError(u'capacity_rank must be positive', path='ladder.teachers')

    def model_config(self):
        return ModelConfig(vocab_size=self.vocab_size, model_dim=self.model_dim, num_heads=self.num_heads,
                           num_layers=self.num_layers, max_seq_len=self.max_seq_len, num_iterations=1)


@dataclass
class Teacher(object):
    spec: TeacherSpec
    model: FlowTransformer
    final_loss: Optional[float] = None


@dataclass(frozen=True)
class TeacherBudget(object):
    steps: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 64
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01

    def schedule(self):
        return OptimizerSchedule(lr_pretrained=self.learning_rate, warmup_fraction=self.warmup_fraction,
                                 total_steps=self.steps, weight_decay=self.weight_decay,
                                 effective_batch_size=self.batch_size, micro_batch_size=self.batch_size)


def train_teacher(spec, task, seed, budget=None):
    """Train a plain (single-iteration) transformer of the given capacity with cross-entropy, then freeze it."""
    budget = budget or TeacherBudget()
    if spec.vocab_size < task.vocab_size:
        raise ConfigError(u'teacher vocabulary {teacher} is smaller than the task vocabulary {task}'.format(
            teacher=spec.vocab_size, task=task.vocab_size), path='ladder.teachers')
    dataset = build_dataset(task, 'train')
    model = FlowTransformer(spec.model_config(), seed=seed)
    try:
        result = pretrain_backbone(model, dataset, budget.schedule(), seed)
    except DivergenceError as e:
        raise DivergenceError(u'teacher {rank} diverged: {error}'.format(rank=spec.capacity_rank, error=e),
                              step=e.step, breakdown=e.breakdown, seed=seed)
    final_loss = result.trajectory[-1]['total'] if result.trajectory else None
    logger.info('teacher %d trained for %d steps, final loss %s', spec.capacity_rank, budget.steps, final_loss)
    return Teacher(spec=spec, model=freeze(model), final_loss=final_loss)


def truncate_renormalize(teacher_logits, student_vocab):
    """Keep the first ``student_vocab`` logits and normalise over them only."""
    teacher_vocab = teacher_logits.shape[-1]
    if student_vocab > teacher_vocab:
        raise SupportMismatchError(u'student vocabulary {student} exceeds teacher vocabulary {teacher}'.format(
            student=student_vocab, teacher=teacher_vocab))
    return numerics.softmax(teacher_logits[..., :student_vocab])


def soft_targets(teacher, x, student_vocab=None):
    """Per-position teacher distribution for ``x``; no gradients are kept."""
    with torch.no_grad():
        logits = teacher.forward_flow(x).final_logits
    if student_vocab is None:
        return numerics.softmax(logits)
    return truncate_renormalize(logits, student_vocab)


class TeacherLadder(object):
    """Frozen teachers ordered by strictly increasing capacity rank."""

    def __init__(self, teachers):
        teachers = list(teachers)
        if not teachers:
            raise ConfigError(u'a ladder needs at least one teacher', path='ladder.teachers')
        ranks = [teacher.spec.capacity_rank for teacher in teachers]
        if any(later <= earlier for earlier, later in zip(ranks, ranks[1:])):
            raise ConfigError(u'capacity ranks must be strictly increasing, got {ranks}'.format(ranks=ranks),
                              path='ladder.teachers')
        sizes = [teacher.model.num_parameters() for teacher in teachers]
        if any(later < earlier for earlier, later in zip(sizes, sizes[1:])):
            raise ConfigError(u'parameter counts must not decrease along the ladder, got {sizes}'.format(
                sizes=sizes), path='ladder.teachers')
        for teacher in teachers:
            freeze(teacher.model)
        self.teachers = teachers
        self._checksums = {}
        self._tables = {}

    def __len__(self):
        return len(self.teachers)

    def __getitem__(self, index):
        return self.teachers[index]

    def __iter__(self):
        return iter(self.teachers)

    @property
    def ranks(self):
        return [teacher.spec.capacity_rank for teacher in self.teachers]

    def checksum(self, teacher_id):
        if teacher_id not in self._checksums:
            self._checksums[teacher_id] = model_checksum(self.teachers[teacher_id].model)
        return self._checksums[teacher_id]

    def assert_frozen(self):
        for teacher in self.teachers:
            if not is_frozen(teacher.model) or any(p.grad is not None for p in teacher.model.parameters()):
                raise AssertionError(u'teacher {rank} is not frozen'.format(rank=teacher.spec.capacity_rank))

    def soft_targets(self, teacher_id, x, student_vocab):
        return soft_targets(self.teachers[teacher_id].model, x, student_vocab)

    def soft_target_table(self, teacher_id, dataset, student_vocab, cache=None):
        """(N, length, student_vocab) soft targets for every example of ``dataset``."""
        key = (self.checksum(teacher_id), dataset.checksum(), student_vocab)
        if key not in self._tables:
            cache = cache or SoftTargetCache()
            self._tables[key] = cache.table(self.teachers[teacher_id].model, key[0], dataset, student_vocab)
        return self._tables[key]


def measure_kl_ladder(student, ladder, prompts):
    """Mean KL(teacher || student) per teacher over the supervised positions of ``prompts``."""
    if len(prompts) == 0:
        raise EmptySampleError(u'cannot measure KL on an empty sample')
    batch = prompts.batch()
    with torch.no_grad():
        p = numerics.softmax(student.forward_flow(batch.inputs).final_logits)
    rows = []
    for teacher_id, teacher in enumerate(ladder):
        q = ladder.soft_targets(teacher_id, batch.inputs, p.support_size)
        rows.append((teacher.spec.capacity_rank, numerics.kl_divergence(q, p, batch.mask).item()))
    return rows


class SoftTargetCache(object):
    """Soft-target tables kept in memory and, given a directory, on disk.

    A file holds one JSON header line (shape, payload sha256) followed by a
    float64 table with one row per (sequence id, position): the id, the position
    and the distribution.
    """

    MAGIC = b'FLOWCOT-SOFTQ'
    VERSION = 1
    CHUNK = 256

    def __init__(self, directory=None):
        self.directory = directory
        self._memory = {}

    def path_for(self, teacher_checksum, dataset_checksum, student_vocab):
        name = '{teacher}-{dataset}-{vocab}.softq'.format(teacher=teacher_checksum[:16],
                                                          dataset=dataset_checksum[:16], vocab=student_vocab)
        return os.path.join(str(self.directory), name)

    def table(self, teacher, teacher_checksum, dataset, student_vocab):
        key = (teacher_checksum, dataset.checksum(), student_vocab)
        if key in self._memory:
            return self._memory[key]
        path = self.path_for(*key) if self.directory else None
        table = None
        if path and os.path.exists(path):
            try:
                table = self.read(path)
                logger.debug('soft targets loaded from %s', path)
            except CacheError as e:
                logger.warning('ignoring soft-target cache %s: %s', path, e)
        if table is None:
            table = self.compute(teacher, dataset, student_vocab)
            if path:
                os.makedirs(str(self.directory), exist_ok=True)
                self.write(path, table, teacher_checksum, dataset.checksum())
        self._memory[key] = table
        return table

    def compute(self, teacher, dataset, student_vocab):
        chunks = []
        for start in range(0, len(dataset), self.CHUNK):
            inputs = dataset.inputs[start:start + self.CHUNK]
            chunks.append(soft_targets(teacher, inputs, student_vocab).probs)
        return torch.cat(chunks, dim=0)

    def write(self, path, table, teacher_checksum, dataset_checksum):
        count, length, vocab = table.shape
        ids = torch.arange(count, dtype=numerics.DTYPE).repeat_interleave(length)
        positions = torch.arange(length, dtype=numerics.DTYPE).repeat(count)
        rows = torch.cat([ids[:, None], positions[:, None], table.reshape(count * length, vocab)], dim=1)
        payload = np.ascontiguousarray(rows.numpy()).tobytes()
        header = {
            'version': self.VERSION,
            'shape': [count, length, vocab],
            'sha256': hashlib.sha256(payload).hexdigest(),
            'teacher': teacher_checksum,
            'dataset': dataset_checksum,
        }
        partial = '{path}.{pid}-{thread}.partial'.format(path=path, pid=os.getpid(), thread=threading.get_ident())
        with open(partial, 'wb') as cache_file:
            cache_file.write(self.MAGIC + b'\n')
            cache_file.write(json.dumps(header, sort_keys=True).encode('utf-8') + b'\n')
            cache_file.write(payload)
        os.replace(partial, path)

    def read(self, path):
        with open(path, 'rb') as cache_file:
            magic = cache_file.readline().rstrip(b'\n')
            if magic != self.MAGIC:
                raise CacheError(u'{path} is not a soft-target cache'.format(path=path))
            try:
                header = json.loads(cache_file.readline().decode('utf-8'))
            except ValueError:
                raise CacheError(u'{path} has a corrupt header'.format(path=path))
            payload = cache_file.read()
        if header.get('version') != self.VERSION:
            raise CacheError(u'{path} has unsupported version {version}'.format(path=path,
                                                                               version=header.get('version')))
        if hashlib.sha256(payload).hexdigest() != header['sha256']:
            raise CacheError(u'{path} failed its checksum'.format(path=path))
        count, length, vocab = header['shape']
        rows = np.frombuffer(payload, dtype=np.float64).reshape(count * length, vocab + 2)
        return torch.from_numpy(rows[:, 2:].copy()).reshape(count, length, vocab)
