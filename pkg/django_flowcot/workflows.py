"""What each management command does, independent of argument parsing.

Every workflow writes its artifacts under one output directory together with a
``<command>-manifest.json`` that references them. Rerunning with the same
configuration either reproduces the artifacts or skips them with a notice.
"""
import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

import pandas as pd

from .config import section_checksum
from .evaluation import EvalReport, early_stop_accuracy, evaluate_per_iteration, kl_ladder_frame, \
    ablation_tables, token_heatmap
from .exceptions import CheckpointError, ConfigError, FlowCotError, TaskMismatchError
from .manifest import RunManifest, manifest_path
from .model import FlowTransformer, load_checkpoint, partition_model, save_checkpoint
from .seeding import derive_seed
from .tasks import build_dataset
from .teachers import SoftTargetCache, Teacher, TeacherLadder, measure_kl_ladder, train_teacher
from .training import make_plan, pretrain_backbone, train

logger = logging.getLogger(__name__)

BACKBONE = 'backbone.pt'
PRETRAIN_LOG = 'pretrain-log.jsonl'
TEACHERS_DIR = 'teachers'
MODEL = 'model.pt'
TRAIN_LOG = 'train-log.jsonl'
EVAL_CSV = 'eval-report.csv'
EVAL_JSON = 'eval-report.json'
KL_LADDER_CSV = 'kl-ladder.csv'
HEATMAP_CSV = 'heatmap.csv'
HEATMAP_JSON = 'heatmap.json'
ABLATE_DIR = 'ablate'

PRETRAIN_SECTIONS = ('model', 'data', 'seed', 'pretrain')
LADDER_SECTIONS = ('data', 'seed', 'ladder')
TRAIN_SECTIONS = ('model', 'partition', 'mechanism', 'plan', 'optimizer', 'data', 'seed', 'pretrain', 'ladder',
                  'train')


@dataclass
class Outcome(object):
    manifest: RunManifest
    payload: Any = None


def _path(out_dir, *parts):
    return os.path.join(str(out_dir), *parts)


def _manifest(command, config):
    return RunManifest(command=command, config_checksum=config.checksum(), seed=config.seed.root)


def _finish(manifest, out_dir):
    manifest.write(manifest_path(out_dir, manifest.command))
    return manifest


def _notice(manifest, message):
    logger.info(message)
    manifest.notice(message)


def _reusable(path, key, value):
    """Load ``path`` if it is a valid checkpoint whose metadata[key] equals ``value``."""
    if not os.path.exists(path):
        return None
    try:
        checkpoint = load_checkpoint(path)
    except CheckpointError as e:
        logger.warning('not reusing %s: %s', path, e)
        return None
    return checkpoint if checkpoint.metadata.get(key) == value else None


def teachers_dir(config, out_dir):
    return config.train.teachers_dir or _path(out_dir, TEACHERS_DIR)


def teacher_path(directory, rank):
    return os.path.join(str(directory), 'teacher-{rank}.pt'.format(rank=rank))


def run_pretrain(config, out_dir):
    manifest = _manifest('pretrain', config)
    os.makedirs(str(out_dir), exist_ok=True)
    path = _path(out_dir, BACKBONE)
    log_path = _path(out_dir, PRETRAIN_LOG)
    checksum = section_checksum(config, *PRETRAIN_SECTIONS)
    if _reusable(path, 'config_checksum', checksum) and os.path.exists(log_path):
        _notice(manifest, u'backbone {path} is up to date, skipping'.format(path=path))
    else:
        seed = config.seed.root
        with manifest.timed('pretrain'):
            model = FlowTransformer(config.build_model_config(num_iterations=1), seed=seed)
            dataset = build_dataset(config.task_spec(), 'train')
            pretrain_backbone(model, dataset, config.pretrain.budget().schedule(), seed, log_path=log_path)
        metadata = {'config_checksum': checksum, 'seed': seed, 'task': config.task_spec().identity()}
        save_checkpoint(model, path, metadata=metadata)
    manifest.add_artifact('backbone', path)
    manifest.add_artifact('log', log_path)
    return Outcome(_finish(manifest, out_dir))


def run_ladder(config, out_dir):
    manifest = _manifest('ladder', config)
    directory = teachers_dir(config, out_dir)
    os.makedirs(directory, exist_ok=True)
    task = config.task_spec()
    checksum = section_checksum(config, *LADDER_SECTIONS)
    budget = config.ladder.budget()
    teachers = []
    for spec in config.teacher_specs():
        path = teacher_path(directory, spec.capacity_rank)
        existing = _reusable(path, 'config_checksum', checksum)
        if existing is not None and existing.metadata.get('capacity_rank') == spec.capacity_rank:
            _notice(manifest, u'teacher {rank} at {path} is up to date, skipping'.format(
                rank=spec.capacity_rank, path=path))
            teacher = Teacher(spec=spec, model=existing.model, final_loss=existing.metadata.get('final_loss'))
        else:
            seed = derive_seed(config.seed.root, 'teacher-{rank}'.format(rank=spec.capacity_rank))
            with manifest.timed('teacher-{rank}'.format(rank=spec.capacity_rank)):
                teacher = train_teacher(spec, task, seed, budget)
            save_checkpoint(teacher.model, path, frozen=True, metadata={
                'config_checksum': checksum, 'capacity_rank': spec.capacity_rank, 'final_loss': teacher.final_loss})
        teachers.append(teacher)
        manifest.add_artifact('teacher-{rank}'.format(rank=spec.capacity_rank), path)
    # validates the ordering of the finished ladder
    ladder = TeacherLadder(teachers)
    return Outcome(_finish(manifest, out_dir), ladder)


def load_ladder(config, out_dir):
    directory = teachers_dir(config, out_dir)
    teachers = []
    for spec in config.teacher_specs():
        path = teacher_path(directory, spec.capacity_rank)
        if not os.path.exists(path):
            raise CheckpointError(u'teacher checkpoint {path} is missing, run the ladder command first'.format(
                path=path))
        checkpoint = load_checkpoint(path)
        if checkpoint.model.config != spec.model_config():
            raise CheckpointError(u'{path} does not match teacher {rank} of the ladder configuration'.format(
                path=path, rank=spec.capacity_rank))
        teachers.append(Teacher(spec=spec, model=checkpoint.model, final_loss=checkpoint.metadata.get('final_loss')))
    return TeacherLadder(teachers)


def _backbone(config, out_dir, manifest):
    path = config.train.backbone or _path(out_dir, BACKBONE)
    if not os.path.exists(path):
        if config.train.backbone:
            raise CheckpointError(u'backbone checkpoint {path} does not exist'.format(path=path))
        _notice(manifest, u'no backbone at {path}, fine-tuning starts from a fresh initialisation'.format(path=path))
        return None
    backbone = load_checkpoint(path).model
    if backbone.config != config.build_model_config(num_iterations=1):
        raise CheckpointError(u'backbone {path} does not match the [model] section'.format(path=path))
    return backbone


def build_student(config, out_dir, manifest):
    mode = config.mode
    num_iterations = config.model.num_iterations if mode.recursive else 1
    seed = config.seed.root
    backbone = _backbone(config, out_dir, manifest)
    if backbone is not None:
        return FlowTransformer.from_backbone(backbone, num_iterations, config.mechanism_kind, config.partition_case,
                                             seed)
    model_config = config.build_model_config(num_iterations=num_iterations)
    return FlowTransformer(model_config, partition_model(model_config, config.partition_case), config.mechanism_kind,
                           seed)


def run_train(config, out_dir):
    manifest = _manifest('train', config)
    os.makedirs(str(out_dir), exist_ok=True)
    path = _path(out_dir, MODEL)
    log_path = _path(out_dir, TRAIN_LOG)
    checksum = section_checksum(config, *TRAIN_SECTIONS)
    if _reusable(path, 'config_checksum', checksum) and os.path.exists(log_path):
        _notice(manifest, u'model {path} is up to date, skipping'.format(path=path))
    else:
        mode = config.mode
        seed = config.seed.root
        model = build_student(config, out_dir, manifest)
        ladder = load_ladder(config, out_dir) if mode.uses_teachers else None
        plan = make_plan(mode, ladder, model.config.num_iterations, config.plan.alpha,
                         config.plan.weights if mode.recursive else None, config.divergence)
        dataset = build_dataset(config.task_spec(), 'train')
        schedule = config.schedule(len(dataset))
        cache = SoftTargetCache(config.train.cache_dir)
        with manifest.timed('train'):
            train(model, plan, dataset, schedule, seed, ladder=ladder, log_path=log_path, cache=cache)
        metadata = {'config_checksum': checksum, 'mode': mode.value, 'seed': seed,
                    'task': config.task_spec().identity()}
        save_checkpoint(model, path, metadata=metadata)
    manifest.add_artifact('model', path)
    manifest.add_artifact('log', log_path)
    return Outcome(_finish(manifest, out_dir))


def _baseline_report(path):
    root, extension = os.path.splitext(str(path))
    if extension == '.csv':
        path = root + '.json'
    if not os.path.exists(path):
        raise CheckpointError(u'baseline report {path} does not exist'.format(path=path))
    return EvalReport.from_json(path)


def _check_task(checkpoint, path, task):
    trained_for = checkpoint.metadata.get('task')
    if trained_for is None:
        # checkpoints written without a task record only tell us their vocabulary
        matches = checkpoint.model.config.vocab_size >= task.vocab_size
    else:
        matches = trained_for == task.identity()
    if not matches:
        raise TaskMismatchError(u'{path} was trained for {trained}, not {task}'.format(
            path=path, trained=trained_for or 'another task', task=task.identity()))


def run_eval(config, out_dir, baseline=None, kl_ladder=False):
    manifest = _manifest('eval', config)
    os.makedirs(str(out_dir), exist_ok=True)
    checkpoint_path = config.eval.checkpoint or _path(out_dir, MODEL)
    if not os.path.exists(checkpoint_path):
        raise CheckpointError(u'model checkpoint {path} is missing, run the train command first'.format(
            path=checkpoint_path))
    checkpoint = load_checkpoint(checkpoint_path)
    model = checkpoint.model
    task = config.task_spec()
    _check_task(checkpoint, checkpoint_path, task)
    dataset = build_dataset(task, config.eval.split)
    metadata = {'mode': checkpoint.metadata.get('mode'), 'seed': checkpoint.metadata.get('seed'),
                'checkpoint': checkpoint.checksum}
    with manifest.timed('evaluate'):
        report = evaluate_per_iteration(model, dataset, metadata=metadata)
        policy = config.early_stop_policy()
        if policy.kind != 'none':
            accuracy, mean_stop = early_stop_accuracy(model, dataset, policy)
            report.metadata['early_stop'] = {'policy': policy.kind, 'threshold': policy.resolved_threshold,
                                             'accuracy': accuracy, 'mean_stop_iteration': mean_stop}
    baseline = baseline or config.eval.baseline
    if baseline:
        report = report.with_baseline(_baseline_report(baseline), str(baseline))
    report.to_csv(_path(out_dir, EVAL_CSV))
    report.to_json(_path(out_dir, EVAL_JSON))
    manifest.add_artifact('report_csv', _path(out_dir, EVAL_CSV))
    manifest.add_artifact('report_json', _path(out_dir, EVAL_JSON))
    if kl_ladder:
        ladder = load_ladder(config, out_dir)
        prompts = build_dataset(task, 'dev').subset(config.eval.kl_ladder_prompts)
        with manifest.timed('kl_ladder'):
            rows = measure_kl_ladder(model, ladder, prompts)
        kl_ladder_frame(rows).to_csv(_path(out_dir, KL_LADDER_CSV), index=False, float_format='%.6f')
        manifest.add_artifact('kl_ladder', _path(out_dir, KL_LADDER_CSV))
    return Outcome(_finish(manifest, out_dir), report)


def run_heatmap(config, out_dir, prompt=None, candidates=None):
    manifest = _manifest('heatmap', config)
    os.makedirs(str(out_dir), exist_ok=True)
    checkpoint_path = config.heatmap.checkpoint or config.eval.checkpoint or _path(out_dir, MODEL)
    if not os.path.exists(checkpoint_path):
        raise CheckpointError(u'model checkpoint {path} is missing, run the train command first'.format(
            path=checkpoint_path))
    model = load_checkpoint(checkpoint_path).model
    prompt = prompt or config.heatmap.prompt
    candidates = candidates or config.heatmap.candidates
    if not prompt or not candidates:
        example = build_dataset(config.task_spec(), 'dev')
        if not prompt:
            prompt = example.prompts[0].tolist()
            _notice(manifest, u'no prompt given, using the first dev prompt {prompt}'.format(prompt=prompt))
        if not candidates:
            candidates = [int(example.answers[0, 0])]
            _notice(manifest, u'no candidates given, using token {token}'.format(token=candidates[0]))
    record = token_heatmap(model, prompt, candidates)
    record.to_csv(_path(out_dir, HEATMAP_CSV))
    record.to_json(_path(out_dir, HEATMAP_JSON))
    manifest.add_artifact('heatmap_csv', _path(out_dir, HEATMAP_CSV))
    manifest.add_artifact('heatmap_json', _path(out_dir, HEATMAP_JSON))
    return Outcome(_finish(manifest, out_dir), record)


@dataclass
class AblationCell(object):
    mode: str
    case: str
    mechanism: str
    seed: int

    @property
    def name(self):
        return '{mode}-{case}-{mechanism}-seed{seed}'.format(**self.__dict__)


def ablation_cells(config):
    section = config.ablate
    return [AblationCell(mode, case, mechanism, seed)
            for mode, case, mechanism, seed in itertools.product(section.modes, section.cases, section.mechanisms,
                                                                 section.seeds)]


def _run_cell(config, out_dir, cell):
    directory = _path(out_dir, ABLATE_DIR, cell.name)
    cell_config = config.with_changes(
        plan={'mode': cell.mode},
        partition={'case': cell.case},
        mechanism={'kind': cell.mechanism},
        seed={'root': cell.seed},
        train={'backbone': config.train.backbone or (_path(out_dir, BACKBONE)
                                                     if os.path.exists(_path(out_dir, BACKBONE)) else None),
               'teachers_dir': teachers_dir(config, out_dir)},
        eval={'checkpoint': None, 'baseline': None},
    )
    run_train(cell_config, directory)
    return run_eval(cell_config, directory).payload


def run_ablation(config, out_dir, workers=1):
    """Train and evaluate every (mode, case, mechanism, seed) cell, then merge the reports.

    A failing cell is recorded in ``cells.csv`` and the rest of the matrix still runs.
    """
    manifest = _manifest('ablate', config)
    directory = _path(out_dir, ABLATE_DIR)
    os.makedirs(directory, exist_ok=True)
    cells = ablation_cells(config)
    if workers < 1:
        raise ConfigError(u'workers must be positive', path='workers')
    with manifest.timed('cells'), ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(_run_cell, config, out_dir, cell) for cell in cells]
    results = []
    for cell, future in zip(cells, futures):
        row = dict(cell.__dict__, name=cell.name, status='ok', error='', report=None)
        try:
            row['report'] = future.result()
        except FlowCotError as e:
            row.update(status='failed', error=str(e))
            _notice(manifest, u'cell {name} failed: {error}'.format(name=cell.name, error=e))
        except Exception as e:
            logger.exception('cell %s crashed', cell.name)
            row.update(status='failed', error=u'{kind}: {error}'.format(kind=type(e).__name__, error=e))
            _notice(manifest, u'cell {name} crashed: {error}'.format(name=cell.name, error=e))
        results.append(row)

    status_path = os.path.join(directory, 'cells.csv')
    pd.DataFrame([{key: row[key] for key in ('name', 'mode', 'case', 'mechanism', 'seed', 'status', 'error')}
                  for row in results]).to_csv(status_path, index=False)
    manifest.add_artifact('cells', status_path)
    by_iteration, by_case = ablation_tables(results)
    for (mode, case), table in by_iteration.items():
        path = os.path.join(directory, 'summary-{mode}-{case}.csv'.format(mode=mode, case=case))
        table.to_csv(path, float_format='%.2f')
        manifest.add_artifact('summary-{mode}-{case}'.format(mode=mode, case=case), path)
    for mode, table in by_case.items():
        path = os.path.join(directory, 'partition-{mode}.csv'.format(mode=mode))
        table.to_csv(path, float_format='%.2f')
        manifest.add_artifact('partition-{mode}'.format(mode=mode), path)
    return Outcome(_finish(manifest, out_dir), {'cells': results, 'by_iteration': by_iteration,
                                                'by_case': by_case})
