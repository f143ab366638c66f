"""Tiny tasks, models and ladders shared by the tests."""
import os

import yaml

from ..model import FlowTransformer, ModelConfig, partition_model
from ..tasks import TaskSpec
from ..teachers import Teacher, TeacherLadder, TeacherSpec, train_teacher, TeacherBudget

MECHANISMS = ('init', 'add', 'catproj', 'gate', 'modinj', 'xattn')


def tiny_task(**kwargs):
    values = dict(name='modadd', modulus=7)
    values.update(kwargs)
    return TaskSpec(**values)


def tiny_config(num_iterations=3, **kwargs):
    values = dict(vocab_size=tiny_task().vocab_size, model_dim=8, num_heads=2, num_layers=4, max_seq_len=8,
                  num_iterations=num_iterations, ffn_multiplier=2)
    values.update(kwargs)
    return ModelConfig(**values)


def tiny_model(mechanism='init', num_iterations=3, case='case2', seed=0, **kwargs):
    config = tiny_config(num_iterations=num_iterations, **kwargs)
    return FlowTransformer(config, partition_model(config, case), mechanism, seed)


def tiny_teacher(rank, model_dim=8, num_layers=2, steps=0, seed=0):
    spec = TeacherSpec(capacity_rank=rank, model_dim=model_dim, num_layers=num_layers,
                       vocab_size=tiny_task().vocab_size, num_heads=2, max_seq_len=8)
    return train_teacher(spec, tiny_task(), seed, TeacherBudget(steps=steps, batch_size=8))


def tiny_ladder(steps=0):
    return TeacherLadder([tiny_teacher(1, 8, 2, steps, seed=1), tiny_teacher(2, 16, 2, steps, seed=2),
                          tiny_teacher(3, 16, 4, steps, seed=3)])


def shared_ladder(teacher, size=3):
    """A ladder whose every rung is the same frozen model."""
    return TeacherLadder([Teacher(spec=TeacherSpec(capacity_rank=rank, model_dim=teacher.spec.model_dim,
                                                   num_layers=teacher.spec.num_layers,
                                                   vocab_size=teacher.spec.vocab_size, num_heads=2, max_seq_len=8),
                                  model=teacher.model)
                          for rank in range(1, size + 1)])


def tiny_run_config(**sections):
    """A desk-minimal run configuration as a plain mapping."""
    data = {
        'model': {'model_dim': 8, 'num_heads': 2, 'num_layers': 4, 'max_seq_len': 8, 'num_iterations': 3,
                  'ffn_multiplier': 2},
        'data': {'task': 'modadd', 'modulus': 7},
        'mechanism': {'kind': 'xattn'},
        'plan': {'mode': 'r_sft'},
        'optimizer': {'lr_pretrained': 0.001, 'total_steps': 2, 'effective_batch_size': 8, 'micro_batch_size': 4},
        'pretrain': {'steps': 2, 'batch_size': 8},
        'ladder': {'teachers': [{'capacity_rank': 1, 'model_dim': 8, 'num_layers': 2, 'num_heads': 2},
                                {'capacity_rank': 2, 'model_dim': 16, 'num_layers': 2, 'num_heads': 2},
                                {'capacity_rank': 3, 'model_dim': 16, 'num_layers': 4, 'num_heads': 2}],
                   'steps': 2, 'batch_size': 8},
        'eval': {'kl_ladder_prompts': 4},
        'ablate': {'mechanisms': ['init', 'xattn'], 'cases': ['case2'], 'modes': ['r_sft'], 'seeds': [0]},
    }
    for name, values in sections.items():
        if values is None:
            data.pop(name, None)
        else:
            data.setdefault(name, {}).update(values)
    return data


def write_run_config(directory, **sections):
    path = os.path.join(str(directory), 'run.yaml')
    with open(path, 'w') as config_file:
        yaml.safe_dump(tiny_run_config(**sections), config_file)
    return path
