"""Per-iteration evaluation, baseline deltas, token heatmaps and early-stopping inference.

Reports are written as comma-separated tables (rounded for reading) and as
JSON objects that keep full precision.
"""
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import pandas as pd
import torch

from . import numerics
from .exceptions import ConfigError, EmptySampleError, InvalidDistributionError, ReportError, ShapeError, \
    TaskMismatchError, TokenRangeError
from .tasks import TaskSpec, build_dataset

HEATMAP_TOLERANCE = 1e-6
DEFAULT_ENTROPY_THRESHOLD = 0.1
DEFAULT_CONSISTENCY_THRESHOLD = 0.01


def format_points(value):
    """Accuracy difference in signed percentage points, e.g. ``+0.85``."""
    return '{value:+.2f}'.format(value=100.0 * value)


@dataclass(frozen=True)
class Deltas(object):
    per_iteration: tuple
    average: float


@dataclass
class EvalReport(object):
    task: str
    split: str
    per_iteration_accuracy: List[float]
    metadata: dict = field(default_factory=dict)
    baseline_reference: Optional[str] = None
    deltas: Optional[Deltas] = None

    def __post_init__(self):
        if not self.per_iteration_accuracy:
            raise ReportError(u'a report needs at least one iteration')
        for accuracy in self.per_iteration_accuracy:
            if not isinstance(accuracy, (int, float)) or not 0.0 <= accuracy <= 1.0:
                raise ReportError(u'accuracy {accuracy} is outside [0, 1]'.format(accuracy=accuracy))

    @property
    def num_iterations(self):
        return len(self.per_iteration_accuracy)

    @property
    def average(self):
        return sum(self.per_iteration_accuracy) / len(self.per_iteration_accuracy)

    def with_baseline(self, baseline, reference):
        return EvalReport(self.task, self.split, list(self.per_iteration_accuracy), dict(self.metadata),
                          baseline_reference=reference, deltas=delta_vs_baseline(self, baseline))

    def to_frame(self):
        rows = [{'iteration': str(index + 1), 'accuracy': accuracy * 100.0}
                for index, accuracy in enumerate(self.per_iteration_accuracy)]
        rows.append({'iteration': 'avg', 'accuracy': self.average * 100.0})
        frame = pd.DataFrame(rows, columns=['iteration', 'accuracy'])
        if self.deltas is not None:
            frame['delta'] = [format_points(value) for value in self.deltas.per_iteration] + \
                [format_points(self.deltas.average)]
        return frame

    def to_csv(self, path):
        self.to_frame().to_csv(str(path), index=False, float_format='%.2f')

    def to_dict(self):
        data = asdict(self)
        if self.deltas is not None:
            data['deltas'] = {'per_iteration': list(self.deltas.per_iteration), 'average': self.deltas.average}
        return data

    def to_json(self, path):
        with open(str(path), 'w') as report_file:
            json.dump(self.to_dict(), report_file, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ReportError(u'expected a JSON object, got {kind}'.format(kind=type(data).__name__))
        missing = [key for key in ('task', 'split', 'per_iteration_accuracy') if key not in data]
        if missing:
            raise ReportError(u'missing {keys}'.format(keys=', '.join(missing)))
        deltas = data.get('deltas')
        if deltas is not None:
            deltas = Deltas(tuple(deltas['per_iteration']), deltas['average'])
        return cls(task=data['task'], split=data['split'], per_iteration_accuracy=list(data['per_iteration_accuracy']),
                   metadata=dict(data.get('metadata') or {}), baseline_reference=data.get('baseline_reference'),
                   deltas=deltas)

    @classmethod
    def from_json(cls, path):
        try:
            with open(str(path)) as report_file:
                return cls.from_dict(json.load(report_file))
        except ReportError as e:
            raise ReportError(u'{path}: {error}'.format(path=path, error=e))
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise ReportError(u'{path} is not an evaluation report: {error}'.format(path=path, error=e))


def delta_vs_baseline(report, baseline):
    """Signed per-iteration and average differences, computed on unrounded values.

    A single-iteration baseline (SFT, DSFT) is compared against every iteration.
    """
    if report.task != baseline.task or report.split != baseline.split:
        raise TaskMismatchError(u'cannot compare {task}/{split} against {base_task}/{base_split}'.format(
            task=report.task, split=report.split, base_task=baseline.task, base_split=baseline.split))
    reference = list(baseline.per_iteration_accuracy)
    if len(reference) == 1:
        reference = reference * report.num_iterations
    elif len(reference) != report.num_iterations:
        raise ShapeError(u'baseline has {base} iterations, report has {report}'.format(
            base=len(reference), report=report.num_iterations))
    per_iteration = tuple(ours - theirs for ours, theirs in zip(report.per_iteration_accuracy, reference))
    return Deltas(per_iteration=per_iteration, average=report.average - baseline.average)


def _report_metadata(model):
    return {
        'mechanism': model.mechanism.value,
        'partition_case': model.partition.case.value,
        'num_iterations': model.config.num_iterations,
    }


def evaluate_per_iteration(model, task, split='dev', batch_size=256, metadata=None):
    """Exact-match accuracy of greedy decoding from each iteration's logits."""
    dataset = build_dataset(task, split) if isinstance(task, TaskSpec) else task
    if len(dataset) == 0:
        raise EmptySampleError(u'the {split} split is empty'.format(split=dataset.split))
    answer_length = dataset.spec.answer_length
    accuracies = []
    for iteration in range(1, model.config.num_iterations + 1):
        correct = 0
        for start in range(0, len(dataset), batch_size):
            prompts = dataset.prompts[start:start + batch_size]
            answers = dataset.answers[start:start + batch_size]
            predicted = model.greedy_decode(prompts, answer_length, iteration)
            correct += int((predicted == answers).all(dim=1).sum().item())
        accuracies.append(correct / float(len(dataset)))
    report_metadata = _report_metadata(model)
    report_metadata.update(metadata or {})
    return EvalReport(task=dataset.spec.name, split=dataset.split, per_iteration_accuracy=accuracies,
                      metadata=report_metadata)


@dataclass
class HeatmapRecord(object):
    """Next-token probability of each candidate per iteration, plus the mass on every other token."""

    prompt: List[int]
    candidates: List[int]
    rows: List[List[float]]

    def __post_init__(self):
        for row in self.rows:
            if abs(sum(row) - 1.0) > HEATMAP_TOLERANCE:
                raise InvalidDistributionError(u'heatmap row sums to {total}'.format(total=sum(row)))

    def to_frame(self):
        columns = ['token_{token}'.format(token=token) for token in self.candidates] + ['other']
        frame = pd.DataFrame(self.rows, columns=columns)
        frame.insert(0, 'iteration', list(range(1, len(self.rows) + 1)))
        return frame

    def to_csv(self, path):
        self.to_frame().to_csv(str(path), index=False, float_format='%.6f')

    def to_json(self, path):
        with open(str(path), 'w') as heatmap_file:
            json.dump(asdict(self), heatmap_file, indent=2)


def token_heatmap(model, prompt, candidates):
    candidates = [int(token) for token in candidates]
    if not candidates:
        raise ConfigError(u'at least one candidate token is needed', path='heatmap.candidates')
    if len(set(candidates)) != len(candidates):
        raise ConfigError(u'candidate tokens must be distinct', path='heatmap.candidates')
    vocab = model.config.vocab_size
    if any(not 0 <= token < vocab for token in candidates):
        raise TokenRangeError(u'candidate tokens must lie in [0, {vocab})'.format(vocab=vocab))
    tokens = model.check_tokens(prompt)
    with torch.no_grad():
        outputs = model.forward_flow(tokens[:1])
    others = torch.ones(vocab, dtype=torch.bool)
    others[candidates] = False
    rows = []
    for logits in outputs.per_step_logits:
        probs = numerics.softmax(logits[0, -1]).probs
        rows.append(probs[candidates].tolist() + [probs[others].sum().item()])
    return HeatmapRecord(prompt=tokens[0].tolist(), candidates=candidates, rows=rows)


@dataclass(frozen=True)
class EarlyStopPolicy(object):
    kind: str = 'none'
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ('none', 'entropy', 'consistency'):
            raise ConfigError(u'unknown early-stop policy "{kind}", valid policies are: none, entropy, '
                              u'consistency'.format(kind=self.kind), path='eval.early_stop')
        if self.kind != 'none' and self.resolved_threshold <= 0:
            raise ConfigError(u'early-stop thresholds must be positive', path='eval.early_stop')

    @property
    def resolved_threshold(self):
        if self.threshold is not None:
            return self.threshold
        return DEFAULT_ENTROPY_THRESHOLD if self.kind == 'entropy' else DEFAULT_CONSISTENCY_THRESHOLD


@dataclass
class EarlyStopResult(object):
    tokens: List[int]
    stop_iteration: int
    scores: List[float]


def early_stop_infer(model, prompt, policy=None, max_new_tokens=1):
    """Run iterations until the stopping criterion holds, then decode from that iteration.

    ``entropy`` stops at the first iteration whose next-token entropy is below the
    threshold; ``consistency`` at the first iteration t >= 2 with
    KL(p_t || p_{t-1}) below it.
    """
    policy = policy or EarlyStopPolicy()
    tokens = model.check_tokens(prompt)[:1]
    threshold = policy.resolved_threshold
    scores = []
    stop = model.config.num_iterations
    with torch.no_grad():
        z0 = model.encode_head(tokens)
        state = None
        previous = None
        for iteration in range(1, model.config.num_iterations + 1):
            state = model.recursive_step(z0, state)
            current = numerics.softmax(model.decode_tail(state)[:, -1])
            if policy.kind == 'entropy':
                scores.append(numerics.entropy(current).max().item())
                if scores[-1] < threshold:
                    stop = iteration
                    break
            elif policy.kind == 'consistency' and previous is not None:
                scores.append(numerics.kl_divergence(current, previous).item())
                if scores[-1] < threshold:
                    stop = iteration
                    break
            previous = current
    output = model.greedy_decode(tokens, max_new_tokens, stop)
    return EarlyStopResult(tokens=output[0].tolist(), stop_iteration=stop, scores=scores)


def early_stop_accuracy(model, dataset, policy):
    """Exact-match accuracy and mean stopping iteration under an early-stop policy."""
    if len(dataset) == 0:
        raise EmptySampleError(u'the {split} split is empty'.format(split=dataset.split))
    correct, stops = 0, 0
    for prompt, answer in zip(dataset.prompts, dataset.answers):
        result = early_stop_infer(model, prompt, policy, dataset.spec.answer_length)
        correct += int(result.tokens == answer.tolist())
        stops += result.stop_iteration
    return correct / float(len(dataset)), stops / float(len(dataset))


def kl_ladder_frame(rows):
    return pd.DataFrame([{'capacity_rank': rank, 'mean_kl': value} for rank, value in rows],
                        columns=['capacity_rank', 'mean_kl'])


def ablation_tables(cells):
    """Summaries of an ablation run.

    ``cells`` holds dicts with mode, case, mechanism, seed and report. Returns
    one iteration-by-mechanism table per (mode, case), averaged over seeds, and
    a case-by-mechanism table of final-iteration accuracy per mode.
    """
    rows = []
    for cell in cells:
        report = cell.get('report')
        if report is None:
            continue
        for index, accuracy in enumerate(report.per_iteration_accuracy):
            rows.append({'mode': cell['mode'], 'case': cell['case'], 'mechanism': cell['mechanism'],
                         'seed': cell['seed'], 'iteration': index + 1, 'accuracy': accuracy * 100.0,
                         'final': index + 1 == report.num_iterations})
    if not rows:
        return {}, {}
    frame = pd.DataFrame(rows)
    mechanisms = list(dict.fromkeys(cell['mechanism'] for cell in cells))
    by_iteration = {}
    for (mode, case), group in frame.groupby(['mode', 'case'], sort=False):
        table = group.pivot_table(index='iteration', columns='mechanism', values='accuracy', aggfunc='mean')
        by_iteration[(mode, case)] = table.reindex(columns=[m for m in mechanisms if m in table.columns])
    by_case = {}
    for mode, group in frame[frame['final']].groupby('mode', sort=False):
        table = group.pivot_table(index='case', columns='mechanism', values='accuracy', aggfunc='mean')
        by_case[mode] = table.reindex(columns=[m for m in mechanisms if m in table.columns])
    return by_iteration, by_case
