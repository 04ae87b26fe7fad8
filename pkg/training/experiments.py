"""
End-to-end pipelines behind the ``cord`` management command.

Each ``run_*`` function takes a resolved TrainConfig and an output directory,
writes its artifacts plus ``config.resolved`` there, and returns a small
result object for the one-line CLI summary.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from django.conf import settings

from alignment.baselines import TeacherBatch, fkl_loss, sft_loss
from alignment.seq_align import RewardLog, score_group, sequence_loss
from alignment.token_align import AlignConfig, token_loss
from autodiff.gradcheck import grad_check
from cord_lab.artifacts import write_csv, write_text
from cord_lab.exceptions import AnalysisError, ConfigError
from evaluation.analysis import analyze_trajectories, divergence_rollouts
from evaluation.evaluate import (
    ALL_TASKS,
    EvalReport,
    evaluate_tasks,
    gap_report,
    write_evals,
    write_gap_report,
)
from policy.checkpoint import load_checkpoint, save_checkpoint
from policy.model import AUDIO, TEXT, ModelConfig, init_params
from rollouts.engine import RolloutGroup, dump_trajectories, load_trajectories, replay
from tasks.datasets import dataset_paths, generate_aux, generate_dataset, load_aux, load_pairs
from tasks.encoding import NoiseSpec, make_pair
from tasks.programs import build_instance
from tasks.vocab import ANSWER

from .config import with_values, write_resolved
from .metrics import METRIC_FIELDS, PRETRAIN_FIELDS, TIMING_FIELDS, CsvLog
from .trainer import SEQUENCE_METHODS, Trainer, pretrain

logger = logging.getLogger(__name__)

MIN_GAP = 15.0
COLLAPSE_MARGIN = 2.0
SWEEP_PARAMS = ('alpha_beta',)
SWEEP_REFERENCE = 1.0


def _prepare(config, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(config, out_dir)
    return out_dir


def load_split(config, split):
    return load_pairs(dataset_paths(config.data_path)['pairs'][split])


def load_eval_sets(config):
    """First ``eval_size`` test pairs and auxiliary test items"""
    paths = dataset_paths(config.data_path)
    pairs = load_pairs(paths['pairs']['test'])[:config.eval_size]
    aux_path = paths['aux']['test']
    aux = load_aux(aux_path)[:config.eval_size] if aux_path.exists() else []
    return pairs, aux


def _evaluate(params, config, pairs, aux, label, step=0):
    return evaluate_tasks(
        params, pairs, max_len=config.max_len, aux_items=aux, label=label, step=step, seed=config.seed,
        threads=settings.CORD_THREADS,
    )


def text_audio_gap(evaluation):
    return evaluation.accuracy(ALL_TASKS, TEXT) - evaluation.accuracy(ALL_TASKS, AUDIO)


@dataclass
class DataResult:
    out_dir: Path
    counts: dict
    aux_counts: dict

    def summary(self):
        return f"Wrote {sum(self.counts.values())} pairs and {sum(self.aux_counts.values())} aux items to {self.out_dir}"


def run_generate_data(config, out_dir):
    out_dir = _prepare(config, out_dir)
    main = generate_dataset(
        config.n_examples, config.split_ratios, config.noise_spec(), config.seed, out_dir,
        max_length=config.max_program_length, modulus_range=config.modulus_range,
    )
    aux = generate_aux(
        config.aux_examples, config.seed, out_dir, ratios=config.split_ratios,
        max_length=config.max_program_length, modulus_range=config.modulus_range,
    )
    return DataResult(out_dir=out_dir, counts=main.counts, aux_counts=aux.counts)


@dataclass
class PretrainResult:
    out_dir: Path
    checkpoint: Path
    evaluation: object

    @property
    def gap(self):
        return text_audio_gap(self.evaluation)

    def summary(self):
        return f"Base checkpoint {self.checkpoint}: text-audio gap {self.gap:.2f} points"


def run_pretrain(config, out_dir):
    """Pretrain the base model, save base.ckpt and evaluate it"""
    out_dir = _prepare(config, out_dir)
    train_pairs = load_split(config, 'train')
    aux_path = dataset_paths(config.data_path)['aux']['train']
    aux_items = load_aux(aux_path) if aux_path.exists() else []
    with CsvLog(out_dir / 'pretrain_metrics.csv', PRETRAIN_FIELDS) as log:
        params, _ = pretrain(config, train_pairs, aux_items, on_step=lambda m: log.append(m.row()))
    checkpoint = save_checkpoint(params, out_dir / 'base.ckpt')

    pairs, aux = load_eval_sets(config)
    evaluation = _evaluate(params, config, pairs, aux, label='base')
    write_evals(out_dir / 'base_eval.csv', [evaluation])
    result = PretrainResult(out_dir=out_dir, checkpoint=checkpoint, evaluation=evaluation)
    if result.gap < MIN_GAP:
        logger.warning(f"Text-audio gap after pretraining is {result.gap:.2f} points, below {MIN_GAP:g}")
    return result


STABILITY_FIELDS = ['step', 'task', 'audio_accuracy', 'base_audio', 'delta', 'collapsed']


def stability_report(base_eval, evaluations):
    """Audio accuracy per checkpoint against the base; drops beyond the margin are collapse"""
    rows = []
    for evaluation in evaluations:
        for task in evaluation.tasks:
            base = base_eval.accuracy(task, AUDIO)
            audio = evaluation.accuracy(task, AUDIO)
            delta = audio - base
            rows.append({
                'step': evaluation.step,
                'task': task,
                'audio_accuracy': f"{audio:.2f}",
                'base_audio': f"{base:.2f}",
                'delta': f"{delta:.2f}",
                'collapsed': int(delta < -COLLAPSE_MARGIN),
            })
    return rows


@dataclass
class ExperimentResult:
    out_dir: Path
    arm: str
    base_eval: object
    evaluations: list = field(default_factory=list)
    gaps: object = None
    collapsed_steps: list = field(default_factory=list)

    @property
    def final_eval(self):
        return self.evaluations[-1] if self.evaluations else self.base_eval

    def summary(self):
        reduction = self.gaps.reductions.get(self.arm) if self.gaps else None
        shown = '-' if reduction is None else f"{reduction}%"
        return (
            f"{self.arm}: audio {self.final_eval.accuracy(ALL_TASKS, AUDIO):.2f} "
            f"(base {self.base_eval.accuracy(ALL_TASKS, AUDIO):.2f}), gap reduction {shown}"
        )


def run_experiment(config, out_dir):
    """Train one arm from the base checkpoint with periodic evaluation"""
    out_dir = _prepare(config, out_dir)
    base = load_checkpoint(config.base_checkpoint_path, config=config.model_config())
    train_pairs = load_split(config, 'train')
    pairs, aux = load_eval_sets(config)
    base_eval = _evaluate(base, config, pairs, aux, label='base')
    params = base.clone()

    eval_steps = sorted({step for step in config.eval_steps if step <= config.max_steps} | {config.max_steps})
    evaluations = []
    reward_log = RewardLog(out_dir / 'rewards.csv') if config.method in SEQUENCE_METHODS else None
    trainer = Trainer(params, config, train_pairs, reward_log=reward_log, threads=settings.CORD_THREADS)
    logger.info(f"Training arm {config.arm} for {config.max_steps} steps, evaluating at {eval_steps}")
    try:
        with CsvLog(out_dir / 'metrics.csv', METRIC_FIELDS) as metrics_log, \
                CsvLog(out_dir / 'timings.csv', TIMING_FIELDS) as timing_log:
            for step in range(1, config.max_steps + 1):
                metrics = trainer.train_step(step)
                metrics_log.append(metrics.row())
                timing_log.append({'step': step, 'wall_time': f"{metrics.wall_time:.6f}"})
                if step in eval_steps:
                    evaluations.append(_evaluate(params, config, pairs, aux, label=config.arm, step=step))
                    save_checkpoint(params, out_dir / f"step_{step}.ckpt")
    finally:
        if reward_log is not None:
            reward_log.close()

    save_checkpoint(params, out_dir / 'final.ckpt')
    write_evals(out_dir / 'evals.csv', [base_eval, *evaluations])
    gaps = gap_report(base_eval, {config.arm: evaluations[-1]})
    write_gap_report(gaps, out_dir)
    rows = stability_report(base_eval, evaluations)
    write_csv(out_dir / 'stability.csv', STABILITY_FIELDS, rows)
    collapsed = sorted({row['step'] for row in rows if row['collapsed']})
    if collapsed:
        logger.warning(f"Arm {config.arm} fell more than {COLLAPSE_MARGIN:g} points below base at steps {collapsed}")
    return ExperimentResult(
        out_dir=out_dir, arm=config.arm, base_eval=base_eval, evaluations=evaluations,
        gaps=gaps, collapsed_steps=collapsed,
    )


SWEEP_FIELDS = ['value', 'task', 'audio_accuracy', 'delta_base', 'relative_delta']


@dataclass
class SweepResult:
    out_dir: Path
    rows: list

    def summary(self):
        return f"Sweep of {len({row['value'] for row in self.rows})} values written to {self.out_dir / 'sweep.csv'}"


def sweep(config, values, out_dir, param='alpha_beta'):
    """
    One run per value with alpha = beta = value.

    ``relative_delta`` is the audio-accuracy gain over the run at 1.0 (or the
    first value when 1.0 is not swept).
    """
    if param not in SWEEP_PARAMS:
        raise AnalysisError(f"Unknown sweep parameter '{param}', expected one of {SWEEP_PARAMS}")
    values = [float(value) for value in values]
    if not values:
        raise AnalysisError("Sweep needs at least one value")
    out_dir = _prepare(config, out_dir)
    finals = {}
    for value in values:
        run = with_values(config, alpha=value, beta=value)
        result = run_experiment(run, out_dir / f"{param}_{value:g}")
        finals[value] = result

    reference = finals[SWEEP_REFERENCE] if SWEEP_REFERENCE in finals else finals[values[0]]
    rows = []
    for value, result in finals.items():
        final = result.final_eval
        for task in final.tasks:
            audio = final.accuracy(task, AUDIO)
            rows.append({
                'value': f"{value:g}",
                'task': task,
                'audio_accuracy': f"{audio:.2f}",
                'delta_base': f"{result.base_eval.accuracy(task, TEXT) - audio:.2f}",
                'relative_delta': f"{audio - reference.final_eval.accuracy(task, AUDIO):.2f}",
            })
    write_csv(out_dir / 'sweep.csv', SWEEP_FIELDS, rows)
    return SweepResult(out_dir=out_dir, rows=rows)


COMPARE_ARMS = ('cord', 'grpo+opd', 'opd', 'grpo', 'sft', 'fkl')
ABLATION_FIELDS = ['arm', 'seeds', *STABILITY_FIELDS, 'audio_min', 'audio_max']


def arm_config(config, arm):
    """Config for one report arm; ``grpo+opd`` is cord with the token weighting switched off"""
    if arm == 'grpo+opd':
        return with_values(config, method='cord', weighting_enabled=False)
    if arm not in COMPARE_ARMS:
        raise ConfigError(f"Unknown arm '{arm}', expected one of {', '.join(COMPARE_ARMS)}")
    return with_values(config, method=arm, weighting_enabled=True)


def median_eval(label, evaluations):
    """Per (task, modality) median accuracy over seed runs of one checkpoint step"""
    first = evaluations[0]
    accuracies = {
        key: float(np.median([evaluation.accuracy(*key) for evaluation in evaluations]))
        for key in first.accuracies
    }
    return EvalReport(label=label, accuracies=accuracies, counts=dict(first.counts), step=first.step)


@dataclass
class CompareResult:
    out_dir: Path
    gaps: object
    rows: list
    seeds: tuple

    def summary(self):
        arms = [arm for arm in self.gaps.averages if arm != 'base']
        best = min(arms, key=lambda arm: self.gaps.averages[arm])
        reduction = self.gaps.reductions[best]
        shown = '-' if reduction is None else f"{reduction}%"
        return (
            f"Compared {len(arms)} arms over {len(self.seeds)} seeds: "
            f"smallest gap {self.gaps.averages[best]} ({best}, reduction {shown})"
        )


def compare(config, arms, seeds, out_dir):
    """
    Train every arm once per seed from the same base checkpoint.

    Writes the cross-arm gap report on seed-median final accuracies and
    ``ablation.csv``: the seed-median audio accuracy of every arm at each
    evaluated step against the base, with collapse flags and the seed range.
    """
    arms = list(dict.fromkeys(arms))
    seeds = tuple(dict.fromkeys(int(seed) for seed in seeds))
    if not arms or not seeds:
        raise AnalysisError("Comparison needs at least one arm and one seed")
    configs = {arm: arm_config(config, arm) for arm in arms}
    out_dir = _prepare(config, out_dir)

    results = {}
    for arm, arm_run in configs.items():
        results[arm] = [
            run_experiment(with_values(arm_run, seed=seed), out_dir / arm / f"seed_{seed}") for seed in seeds
        ]
        logger.info(f"Arm {arm}: {len(seeds)} seed runs finished")

    base_eval = median_eval('base', [result.base_eval for runs in results.values() for result in runs])
    finals = {}
    rows = []
    for arm, runs in results.items():
        per_step = [list(step_evals) for step_evals in zip(*(result.evaluations for result in runs))]
        medians = [median_eval(arm, step_evals) for step_evals in per_step]
        finals[arm] = medians[-1] if medians else base_eval
        spans = {
            (median.step, task): [evaluation.accuracy(task, AUDIO) for evaluation in step_evals]
            for median, step_evals in zip(medians, per_step) for task in median.tasks
        }
        for row in stability_report(base_eval, medians):
            audio = spans[(row['step'], row['task'])]
            rows.append({
                'arm': arm,
                'seeds': len(seeds),
                **row,
                'audio_min': f"{min(audio):.2f}",
                'audio_max': f"{max(audio):.2f}",
            })

    gaps = gap_report(base_eval, finals)
    write_gap_report(gaps, out_dir)
    write_csv(out_dir / 'ablation.csv', ABLATION_FIELDS, rows)
    return CompareResult(out_dir=out_dir, gaps=gaps, rows=rows, seeds=seeds)


@dataclass
class EvalResult:
    out_dir: Path
    evaluation: object

    def summary(self):
        evaluation = self.evaluation
        return (
            f"{evaluation.label}: text {evaluation.accuracy(ALL_TASKS, TEXT):.2f}, "
            f"audio {evaluation.accuracy(ALL_TASKS, AUDIO):.2f}"
        )


def run_eval(config, out_dir, checkpoint=None):
    """Evaluate a checkpoint (the base one by default) and report its gap"""
    out_dir = _prepare(config, out_dir)
    path = Path(checkpoint) if checkpoint else config.base_checkpoint_path
    params = load_checkpoint(path, config=config.model_config())
    pairs, aux = load_eval_sets(config)
    evaluation = _evaluate(params, config, pairs, aux, label=path.stem)
    write_evals(out_dir / 'evals.csv', [evaluation])
    if path != config.base_checkpoint_path and config.base_checkpoint_path.exists():
        base = load_checkpoint(config.base_checkpoint_path, config=config.model_config())
        write_gap_report(gap_report(_evaluate(base, config, pairs, aux, label='base'), {path.stem: evaluation}), out_dir)
    return EvalResult(out_dir=out_dir, evaluation=evaluation)


@dataclass
class AnalyzeResult:
    out_dir: Path
    summary_stats: object

    def summary(self):
        stats = self.summary_stats
        skew = 'right-skewed' if stats.right_skewed else 'not right-skewed'
        return f"{stats.n} steps analyzed: mean D_t {stats.mean:.4f}, median {stats.median:.4f} ({skew})"


def run_analyze(config, out_dir, checkpoint=None, trajectories=None, bins=20, q=80.0):
    """Divergence statistics from a trajectory dump or fresh rollouts of a checkpoint"""
    out_dir = _prepare(config, out_dir)
    if trajectories:
        loaded = load_trajectories(trajectories)
    else:
        path = Path(checkpoint) if checkpoint else config.base_checkpoint_path
        params = load_checkpoint(path, config=config.model_config())
        pairs, _ = load_eval_sets(config)
        loaded = divergence_rollouts(
            params, pairs, temperature=config.token_temperature, max_len=config.max_len,
            seed=config.seed, threads=settings.CORD_THREADS,
        )
        dump_trajectories(out_dir / 'trajectories.jsonl', loaded)
    stats = analyze_trajectories(loaded, out_dir, bins=bins, q=q)
    return AnalyzeResult(out_dir=out_dir, summary_stats=stats)


GRADCHECK_MODEL = ModelConfig(
    d_model=16, n_layers=2, n_heads=2, context_size=48, max_output_len=16, precision='f64', init_std=0.2,
)
F32_TOLERANCE = 1e-3


@dataclass
class GradCheckResult:
    out_dir: Path
    reports: dict

    @property
    def passed(self):
        return all(report.passed for report in self.reports.values())

    def summary(self):
        worst = max(report.max_rel_error for report in self.reports.values())
        return f"Gradient check {'passed' if self.passed else 'FAILED'}: worst relative error {worst:.3e}"


def gradcheck_losses(params, config):
    """Loss builders for every training objective on fixed fixture trajectories"""
    noise = NoiseSpec(p_sub=0.1, p_dup=0.1, seed=config.seed)
    pair = make_pair(build_instance(2, [('*', 3), ('+', 4)], 5), noise, None, 'gradcheck-000')
    tokens = [(1, ANSWER, 0), (2, 0, ANSWER, 3), (1, ANSWER, 1), (4,)]
    rollout = replay(params, pair, tokens[1])
    group = RolloutGroup(pair=pair, trajectories=[replay(params, pair, t) for t in tokens])
    score_group(group, replay(params, pair, tokens[0]))
    teacher = TeacherBatch(pairs=[pair], rollouts=[rollout])
    align = AlignConfig(top_k=config.top_k, alpha=config.alpha, beta=config.beta)
    return {
        'L_tok': lambda: token_loss(rollout, params, align),
        'L_seq': lambda: sequence_loss(group, params),
        'L_SFT': lambda: sft_loss(teacher, params),
        'L_FKL': lambda: fkl_loss(teacher, params),
    }


def run_grad_check(config, out_dir, eps=None, tolerance=1e-5, max_entries=4, precision='f64'):
    """
    Finite-difference check of every loss on a two-layer d=16 model.

    Below f64 the analytic gradients are taken in the requested precision and
    compared with central differences of an f64 copy of the same parameters.
    """
    out_dir = _prepare(config, out_dir)
    eps = settings.CORD_GRADCHECK_EPS if eps is None else eps
    model = ModelConfig(**{**GRADCHECK_MODEL.to_dict(), 'precision': precision})
    params = init_params(model, config.seed)
    builders = gradcheck_losses(params, config)
    oracles = {}
    if precision != 'f64':
        tolerance = max(tolerance, F32_TOLERANCE)
        oracle_params = params.with_precision('f64')
        oracles = {
            name: (builder, dict(oracle_params.items()))
            for name, builder in gradcheck_losses(oracle_params, config).items()
        }
    reports = {}
    oracle = 'f64' if oracles else precision
    lines = [f"eps={eps:g} tolerance={tolerance:g} precision={precision} oracle={oracle}"]
    for name, builder in builders.items():
        report = grad_check(builder, dict(params.items()), eps=eps, tolerance=tolerance,
                            max_entries=max_entries, seed=config.seed, reference=oracles.get(name))
        reports[name] = report
        lines.append(f"[{name}] {'ok' if report.passed else 'FAIL'} max_rel_err={report.max_rel_error:.3e}")
        lines.extend(f"  {line}" for line in report.summary_lines())
        logger.info(f"Gradient check {name}: max relative error {report.max_rel_error:.3e}")
    write_text(out_dir / 'gradcheck.txt', '\n'.join(lines) + '\n')
    return GradCheckResult(out_dir=out_dir, reports=reports)
