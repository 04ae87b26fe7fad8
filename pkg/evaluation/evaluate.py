"""
Accuracy evaluation per modality and the modality-gap report.

Accuracies are percentages over greedy decodes. Gap arithmetic runs on
Decimals built from the printed accuracies, so a gap of 44.46 - 38.06 is
reported as 6.40 and not 6.399999999999999.
"""
import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from alignment.seq_align import extract_answer
from autodiff.tensor import no_grad
from cord_lab.artifacts import write_csv, write_text
from cord_lab.exceptions import AnalysisError
from policy.model import AUDIO, MODALITIES, TEXT, Condition, aux_log_probs
from rollouts.engine import map_ordered, sample_rollout, teacher_reference
from tasks.datasets import eval_buckets
from tasks.vocab import AUX_LABELS

logger = logging.getLogger(__name__)

ALL_TASKS = 'all'
AUX_TASK = 'aux'
CENT = Decimal('0.01')
TENTH = Decimal('0.1')


def greedy_decoder(params, modality, max_len=200):
    """pair -> greedy output tokens under the given conditioning"""
    if modality not in MODALITIES:
        raise AnalysisError(f"Unknown modality '{modality}'")

    def decode(pair):
        if modality == TEXT:
            return teacher_reference(params, pair, decode_mode='greedy', max_len=max_len).tokens
        return sample_rollout(params, pair, max_len=max_len, greedy=True, record_teacher=False).tokens

    return decode


def evaluate(params, pairs, modality, max_len=200, decode=None, threads=None):
    """
    Percentage of pairs whose decoded answer equals the ground truth.

    ``decode`` maps a pair to output tokens; greedy decoding of ``params``
    under ``modality`` is used when it is not given.
    """
    pairs = list(pairs)
    if not pairs:
        raise AnalysisError(f"Cannot evaluate {modality} accuracy on an empty dataset")
    decode = decode or greedy_decoder(params, modality, max_len)
    outputs = map_ordered(decode, pairs, threads=threads)
    correct = sum(int(extract_answer(tokens) == pair.answer) for pair, tokens in zip(pairs, outputs))
    accuracy = 100.0 * correct / len(pairs)
    logger.debug(f"{modality} accuracy {accuracy:.2f} ({correct}/{len(pairs)})")
    return accuracy


def evaluate_aux(params, items):
    """Retention accuracy of the auxiliary audio head"""
    items = list(items)
    if not items:
        raise AnalysisError("Cannot evaluate the auxiliary task on an empty dataset")
    correct = 0
    with no_grad():
        for item in items:
            log_probs = aux_log_probs(params, Condition(AUDIO, item.x_audio)).data[0]
            correct += int(AUX_LABELS[int(np.argmax(log_probs))] == item.label)
    return 100.0 * correct / len(items)


@dataclass
class EvalReport:
    """Accuracies of one checkpoint keyed by (task, modality)"""
    label: str
    accuracies: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    seed: int = 0
    step: int = 0

    def accuracy(self, task, modality):
        try:
            return self.accuracies[(task, modality)]
        except KeyError:
            raise AnalysisError(f"No {modality} accuracy for task '{task}' in report '{self.label}'") from None

    @property
    def tasks(self):
        """Eval tasks in insertion order, auxiliary excluded"""
        seen = []
        for task, _ in self.accuracies:
            if task != AUX_TASK and task not in seen:
                seen.append(task)
        return seen

    def rows(self):
        for (task, modality), accuracy in self.accuracies.items():
            yield {
                'label': self.label,
                'step': self.step,
                'seed': self.seed,
                'task': task,
                'modality': modality,
                'n': self.counts.get(task, 0),
                'accuracy': f"{accuracy:.2f}",
            }


EVAL_FIELDS = ['label', 'step', 'seed', 'task', 'modality', 'n', 'accuracy']


def evaluate_tasks(params, pairs, max_len=200, modalities=MODALITIES, aux_items=None,
                   label='', step=0, seed=0, threads=None):
    """Accuracy per eval bucket and modality, plus auxiliary retention"""
    pairs = list(pairs)
    report = EvalReport(label=label, seed=seed, step=step)
    tasks = {name: bucket for name, bucket in eval_buckets(pairs).items() if bucket}
    tasks[ALL_TASKS] = pairs
    for modality in modalities:
        decode = greedy_decoder(params, modality, max_len)
        outputs = dict(zip((p.id for p in pairs), map_ordered(decode, pairs, threads=threads)))
        for task, bucket in tasks.items():
            report.accuracies[(task, modality)] = evaluate(
                params, bucket, modality, decode=lambda pair: outputs[pair.id], threads=1,
            )
            report.counts[task] = len(bucket)
    if aux_items:
        report.accuracies[(AUX_TASK, AUDIO)] = evaluate_aux(params, aux_items)
        report.counts[AUX_TASK] = len(aux_items)
    summary = ', '.join(f"{task}/{modality}={value:.2f}" for (task, modality), value in report.accuracies.items())
    logger.info(f"Eval {label or 'model'} step {step}: {summary}")
    return report


def write_evals(path, reports):
    return write_csv(path, EVAL_FIELDS, (row for report in reports for row in report.rows()))


def _decimal(value):
    """The value as printed to two decimals, so raw float accuracies never leak extra digits"""
    return Decimal(format(value, '.2f'))


def modality_gap(base_text, method_audio):
    """Acc_text(base) - Acc_audio(method), exact on the printed values"""
    return _decimal(base_text) - _decimal(method_audio)


def relative_reduction(base_gap, method_gap):
    """Percentage of the base gap closed, to one decimal; None for a zero base gap"""
    base_gap, method_gap = _decimal(base_gap), _decimal(method_gap)
    if base_gap == 0:
        return None
    return ((base_gap - method_gap) / base_gap * 100).quantize(TENTH, rounding=ROUND_HALF_EVEN)


def _average(values):
    return (sum(values, Decimal(0)) / len(values)).quantize(CENT, rounding=ROUND_HALF_EVEN)


@dataclass
class GapRow:
    method: str
    task: str
    base_text: Decimal
    audio: Decimal
    gap: Decimal


@dataclass
class GapReport:
    tasks: list
    base_gap: Decimal
    rows: list = field(default_factory=list)
    averages: dict = field(default_factory=dict)
    reductions: dict = field(default_factory=dict)

    def as_text(self):
        width = max([len('method')] + [len(method) for method in self.averages])
        header = f"{'method':<{width}}  " + '  '.join(f"{task:>8}" for task in self.tasks) + '   avg gap  reduction'
        lines = [header]
        for method, average in self.averages.items():
            gaps = {row.task: row.gap for row in self.rows if row.method == method}
            cells = '  '.join(f"{gaps[task]:>8}" for task in self.tasks)
            reduction = self.reductions.get(method)
            shown = '-' if reduction is None else f"{reduction}%"
            lines.append(f"{method:<{width}}  {cells}  {average:>8}  {shown:>9}")
        return '\n'.join(lines) + '\n'


GAP_FIELDS = ['method', 'task', 'base_text', 'audio', 'gap']


def gap_report(base_eval, method_evals):
    """
    Modality gap of every method against the base checkpoint's text accuracy.

    ``method_evals`` maps a method name to its EvalReport. The base model's
    own gap (text minus audio) is the reference for relative reduction.
    """
    if base_eval is None:
        raise AnalysisError("Gap report needs the base checkpoint evaluation")
    tasks = [task for task in base_eval.tasks if task != ALL_TASKS] or [ALL_TASKS]
    base_text = {task: _decimal(base_eval.accuracy(task, TEXT)) for task in tasks}
    base_gap = _average([base_text[task] - _decimal(base_eval.accuracy(task, AUDIO)) for task in tasks])
    report = GapReport(tasks=tasks, base_gap=base_gap)
    for method, evaluation in {'base': base_eval, **dict(method_evals)}.items():
        gaps = []
        for task in tasks:
            audio = _decimal(evaluation.accuracy(task, AUDIO))
            gap = base_text[task] - audio
            report.rows.append(GapRow(method, task, base_text[task], audio, gap))
            gaps.append(gap)
        report.averages[method] = _average(gaps)
        report.reductions[method] = relative_reduction(base_gap, report.averages[method])
    logger.info(f"Gap report: base gap {base_gap}, " + ', '.join(
        f"{method}={average}" for method, average in report.averages.items()))
    return report


def write_gap_report(report, out_dir):
    """gap_report.csv plus the pretty-printed gap_report.txt"""
    rows = ({
        'method': row.method,
        'task': row.task,
        'base_text': str(row.base_text),
        'audio': str(row.audio),
        'gap': str(row.gap),
    } for row in report.rows)
    path = write_csv(f"{out_dir}/gap_report.csv", GAP_FIELDS, rows)
    write_text(f"{out_dir}/gap_report.txt", report.as_text())
    return path
