"""Synthetic tasks with small vocabularies and exact-match answers.

* ``modadd``: ``a + b =`` -> ``(a + b) mod p``
* ``addsub``: fixed-width multi-digit addition or subtraction with a signed answer
* ``reverse`` / ``copy``: a symbol string followed by a separator, answered by
  the string reversed or copied
"""
import hashlib
import random
from dataclasses import dataclass

import torch

from .exceptions import ConfigError, EmptyMaskError, EmptySampleError, ShapeError
from .seeding import derive_seed

TASK_NAMES = ('modadd', 'addsub', 'reverse', 'copy')
SPLITS = ('train', 'dev', 'test')
# hash buckets out of ten for the sampled tasks
SPLIT_BUCKETS = {'train': range(0, 8), 'dev': range(8, 9), 'test': range(9, 10)}


@dataclass(frozen=True)
class TaskSpec(object):
    name: str = 'modadd'
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

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise ConfigError(u'unknown task "{name}", valid tasks are: {valid}'.format(
                name=self.name, valid=', '.join(TASK_NAMES)), path='data.task')
        for name in ('modulus', 'num_digits', 'sequence_length', 'alphabet_size'):
            if getattr(self, name) < 1:
                raise ConfigError(u'must be positive', path='data.{name}'.format(name=name))
        if self.modulus < 2:
            raise ConfigError(u'modulus must be at least 2', path='data.modulus')
        if not (0 < self.train_fraction and 0 <= self.dev_fraction and self.train_fraction + self.dev_fraction <= 1):
            raise ConfigError(u'train_fraction and dev_fraction must leave a valid split', path='data.train_fraction')

    @property
    def vocab_size(self):
        if self.name == 'modadd':
            return self.modulus + 2
        if self.name == 'addsub':
            return 13
        return self.alphabet_size + 1

    @property
    def prompt_length(self):
        if self.name == 'modadd':
            return 4
        if self.name == 'addsub':
            return 2 * self.num_digits + 2
        return self.sequence_length + 1

    @property
    def answer_length(self):
        if self.name == 'modadd':
            return 1
        if self.name == 'addsub':
            return self.num_digits + 2
        return self.sequence_length

    @property
    def total_length(self):
        return self.prompt_length + self.answer_length

    def identity(self):
        """The parameters that decide what the examples look like, ignoring split sizes and seeds."""
        params = {'modadd': ('modulus',), 'addsub': ('num_digits',)}.get(
            self.name, ('sequence_length', 'alphabet_size'))
        return dict({name: getattr(self, name) for name in params}, task=self.name)

    def seed_for(self, split):
        return {'train': self.train_seed, 'dev': self.dev_seed, 'test': self.test_seed}[split]


@dataclass(frozen=True)
class TrainingBatch(object):
    """Teacher-forced inputs with next-token targets; ``mask`` marks the supervised positions."""

    inputs: torch.Tensor
    targets: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if not (self.inputs.shape == self.targets.shape == self.mask.shape):
            raise ShapeError(u'inputs {inputs}, targets {targets} and mask {mask} must have equal shapes'.format(
                inputs=tuple(self.inputs.shape), targets=tuple(self.targets.shape), mask=tuple(self.mask.shape)))

    def check_mask(self):
        if not bool(self.mask.any()):
            raise EmptyMaskError(u'the batch has no supervised positions')
        return self


def _digits(value, width):
    return [int(char) for char in str(value).zfill(width)]


def _bucket(key):
    digest = hashlib.blake2b(repr(key).encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little') % 10


def _encode(spec, key):
    """Return (prompt tokens, answer tokens) for one generator key."""
    if spec.name == 'modadd':
        a, b = key
        p = spec.modulus
        return [a, p, b, p + 1], [(a + b) % p]
    if spec.name == 'addsub':
        a, op, b = key
        plus, minus, equals = 10, 11, 12
        result = a + b if op == plus else a - b
        sign = plus if result >= 0 else minus
        width = spec.num_digits
        return _digits(a, width) + [op] + _digits(b, width) + [equals], [sign] + _digits(abs(result), width + 1)
    separator = spec.alphabet_size
    symbols = list(key)
    answer = symbols[::-1] if spec.name == 'reverse' else symbols
    return symbols + [separator], answer


def _sample_key(spec, rng):
    if spec.name == 'addsub':
        limit = 10 ** spec.num_digits
        return (rng.randrange(limit), rng.choice((10, 11)), rng.randrange(limit))
    return tuple(rng.randrange(spec.alphabet_size) for _ in range(spec.sequence_length))


def _keys(spec, split):
    if spec.name == 'modadd':
        pairs = [(a, b) for a in range(spec.modulus) for b in range(spec.modulus)]
        random.Random(derive_seed(spec.train_seed, 'task')).shuffle(pairs)
        n_train = int(round(spec.train_fraction * len(pairs)))
        n_dev = int(round(spec.dev_fraction * len(pairs)))
        bounds = {'train': (0, n_train), 'dev': (n_train, n_train + n_dev), 'test': (n_train + n_dev, len(pairs))}
        start, stop = bounds[split]
        return pairs[start:stop]
    size = {'train': spec.train_size, 'dev': spec.dev_size, 'test': spec.test_size}[split]
    rng = random.Random(derive_seed(spec.seed_for(split), 'task'))
    keys = []
    attempts = 0
    while len(keys) < size:
        attempts += 1
        if attempts > 1000 * max(size, 1):
            raise EmptySampleError(u'could not sample {size} {split} examples for {task}'.format(
                size=size, split=split, task=spec.name))
        key = _sample_key(spec, rng)
        if _bucket(key) in SPLIT_BUCKETS[split]:
            keys.append(key)
    return keys


class TaskDataset(object):
    """All examples of one split, held as (N, length) token tensors."""

    def __init__(self, spec, split, keys):
        self.spec = spec
        self.split = split
        self.keys = list(keys)
        prompts, answers = [], []
        for key in self.keys:
            prompt, answer = _encode(spec, key)
            prompts.append(prompt)
            answers.append(answer)
        self.prompts = torch.tensor(prompts, dtype=torch.long).reshape(len(prompts), spec.prompt_length)
        self.answers = torch.tensor(answers, dtype=torch.long).reshape(len(answers), spec.answer_length)
        sequences = torch.cat([self.prompts, self.answers], dim=1)
        self.inputs = sequences[:, :-1]
        self.targets = sequences[:, 1:]
        self.mask = torch.zeros_like(self.inputs, dtype=torch.bool)
        self.mask[:, spec.prompt_length - 1:] = True
        self._checksum = None

    def __len__(self):
        return len(self.keys)

    def batch(self, indices=None):
        if indices is None:
            return TrainingBatch(self.inputs, self.targets, self.mask)
        indices = torch.as_tensor(indices, dtype=torch.long)
        return TrainingBatch(self.inputs[indices], self.targets[indices], self.mask[indices])

    def subset(self, count):
        return TaskDataset(self.spec, self.split, self.keys[:count])

    def checksum(self):
        if self._checksum is None:
            digest = hashlib.sha256(repr((self.spec, self.split)).encode('utf-8'))
            digest.update(self.inputs.numpy().tobytes())
            digest.update(self.targets.numpy().tobytes())
            self._checksum = digest.hexdigest()
        return self._checksum


def build_dataset(spec, split):
    if split not in SPLITS:
        raise ConfigError(u'unknown split "{split}", valid splits are: {valid}'.format(
            split=split, valid=', '.join(SPLITS)), path='eval.split')
    return TaskDataset(spec, split, _keys(spec, split))
