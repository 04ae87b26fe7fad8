"""
Pretraining and alignment training loops.

``pretrain`` induces the modality gap: full text-conditioned supervision,
audio-conditioned supervision on a small fixed subset, plus the auxiliary
audio head. ``Trainer`` runs one alignment arm from a base checkpoint with
exactly one optimizer step per ``train_step``.
"""
import logging
import math
import time
from collections import Counter

import numpy as np

from alignment.baselines import TeacherBatch, build_teacher_batch, fkl_loss, sft_loss
from alignment.seq_align import score_group, sequence_loss
from alignment.token_align import token_loss
from autodiff import ops
from autodiff.optim import OptimState, global_grad_norm, optimizer_step
from autodiff.tensor import backward
from cord_lab.exceptions import ConfigError, NonFiniteError
from cord_lab.seeding import derive_seed, substream
from policy.model import AUDIO, Condition, aux_log_probs, init_params, sequence_logprob
from rollouts.engine import map_ordered, sample_group, sample_rollout, teacher_reference
from tasks.vocab import AUX_LABELS

from .metrics import PretrainMetrics, StepMetrics

logger = logging.getLogger(__name__)

TOKEN_METHODS = ('cord', 'opd')
SEQUENCE_METHODS = ('cord', 'grpo')
BASELINE_LOSSES = {'sft': sft_loss, 'fkl': fkl_loss}


def optim_state(config, lr):
    return OptimState(
        lr=lr,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def _check_finite(value, what, step):
    if not math.isfinite(value):
        raise NonFiniteError(f"{what} is {value} at step {step}")


def _mean(terms, dtype):
    """Mean of a list of scalar tensors; constant 0 when empty"""
    if not terms:
        return ops.zeros_scalar(dtype)
    loss = terms[0]
    for term in terms[1:]:
        loss = ops.add(loss, term)
    return ops.scale(loss, 1.0 / len(terms))


def audio_subset(n, fraction, seed):
    """Fixed indices of the training pairs that get audio-conditioned targets"""
    size = max(1, int(round(n * fraction)))
    return np.sort(substream(seed, 'pretrain', 'audio-subset').choice(n, size=size, replace=False))


def pretrain(config, train_pairs, aux_items=(), on_step=None):
    """
    Cross-entropy pretraining from a fresh initialization.

    Per step: ``pretrain_batch_size`` text-conditioned targets, a proportional
    share of audio-conditioned targets drawn from the fixed audio subset, and
    as many auxiliary examples. Returns (params, [PretrainMetrics]).
    """
    train_pairs, aux_items = list(train_pairs), list(aux_items)
    if not train_pairs:
        raise ConfigError("Pretraining needs a non-empty training split")
    params = init_params(config.model_config(), derive_seed(config.seed, 'init'))
    state = optim_state(config, config.pretrain_lr)
    dtype = params.config.dtype
    pool = audio_subset(len(train_pairs), config.audio_fraction, config.seed)
    text_size = min(config.pretrain_batch_size, len(train_pairs))
    audio_size = min(max(1, int(round(config.pretrain_batch_size * config.audio_fraction))), len(pool))
    aux_size = min(audio_size, len(aux_items))
    logger.info(
        f"Pretraining {params} for {config.pretrain_steps} steps: {text_size} text, "
        f"{audio_size} audio (pool {len(pool)}), {aux_size} aux examples per step"
    )

    history = []
    for step in range(1, config.pretrain_steps + 1):
        rng = substream(config.seed, 'pretrain', step)
        text_batch = [train_pairs[i] for i in rng.choice(len(train_pairs), size=text_size, replace=False)]
        audio_batch = [train_pairs[i] for i in rng.choice(pool, size=audio_size, replace=False)]
        aux_batch = [aux_items[i] for i in rng.choice(len(aux_items), size=aux_size, replace=False)] if aux_size else []

        params.zero_grad()
        text_terms = [ops.scale(sequence_logprob(params, Condition.text(p), p.target), -1.0) for p in text_batch]
        audio_terms = [ops.scale(sequence_logprob(params, Condition.audio(p), p.target), -1.0) for p in audio_batch]
        aux_terms = [
            ops.scale(ops.total(ops.pick(aux_log_probs(params, Condition(AUDIO, item.x_audio)), [AUX_LABELS.index(item.label)])), -1.0)
            for item in aux_batch
        ]
        l_text, l_audio, l_aux = _mean(text_terms, dtype), _mean(audio_terms, dtype), _mean(aux_terms, dtype)
        share = len(text_terms) / (len(text_terms) + len(audio_terms))
        total = ops.add(
            ops.add(ops.scale(l_text, share), ops.scale(l_audio, 1.0 - share)),
            ops.scale(l_aux, config.aux_weight),
        )
        _check_finite(total.item(), 'Pretraining loss', step)
        backward(total)
        grads = params.gradients()
        grad_norm = global_grad_norm(grads)
        optimizer_step(dict(params.items()), grads, state)

        metrics = PretrainMetrics(step, l_text.item(), l_audio.item(), l_aux.item(), total.item(), grad_norm)
        history.append(metrics)
        if on_step is not None:
            on_step(metrics)
        if step % 100 == 0 or step == config.pretrain_steps:
            logger.info(f"Pretrain step {step}: text {metrics.l_text:.4f} audio {metrics.l_audio:.4f} aux {metrics.l_aux:.4f}")
    params.zero_grad()
    return params, history


class Trainer:
    """
    One alignment arm over a fixed training split.

    ``calls`` counts how often each objective ran, so tests can assert which
    losses an arm touches.
    """

    def __init__(self, params, config, train_pairs, reward_log=None, threads=None):
        if not train_pairs:
            raise ConfigError("Training needs a non-empty training split")
        self.params = params
        self.config = config
        self.train_pairs = list(train_pairs)
        self.align = config.align_config()
        self.state = optim_state(config, config.lr)
        self.reward_log = reward_log
        self.threads = threads
        self.calls = Counter()
        self._teacher_cache = {}

    @property
    def step(self):
        return self.state.step

    def sample_batch(self, step):
        size = min(self.config.batch_size, len(self.train_pairs))
        indices = substream(self.config.seed, 'batch', step).choice(len(self.train_pairs), size=size, replace=False)
        return [self.train_pairs[i] for i in indices]

    def token_terms(self, batch, step):
        """Weighted reverse-KL loss, one on-policy rollout per prompt"""
        config = self.config

        def rollout(pair):
            return sample_rollout(
                self.params, pair, temperature=config.token_temperature, max_len=config.max_len,
                seed=derive_seed(config.seed, 'rollout', step, pair.id),
            )

        trajectories = map_ordered(rollout, batch, threads=self.threads)
        terms = []
        for trajectory in trajectories:
            terms.append(token_loss(trajectory, self.params, self.align))
            self.calls['token_loss'] += 1
        divergences = np.concatenate([t.divergences for t in trajectories])
        mean_kl = float(np.mean(divergences)) if divergences.size else 0.0
        return _mean(terms, self.params.config.dtype), mean_kl

    def sequence_terms(self, batch, step):
        """Group-relative policy gradient against text-conditioned references"""
        config = self.config

        def group(pair):
            members = sample_group(
                self.params, pair, config.group_size, temperature=config.grpo_temperature,
                seed=derive_seed(config.seed, 'rollout', step), max_len=config.max_len,
            )
            reference = teacher_reference(
                self.params, pair, decode_mode=config.reference_mode, max_len=config.max_len,
                seed=derive_seed(config.seed, 'reference', step, pair.id),
            )
            return score_group(members, reference)

        groups = map_ordered(group, batch, threads=self.threads)
        terms = []
        for scored in groups:
            terms.append(sequence_loss(scored, self.params, length_normalized=config.length_normalized))
            self.calls['sequence_loss'] += 1
            if self.reward_log is not None:
                self.reward_log.append(step, scored)
        mean_reward = float(np.mean([scored.rewards for scored in groups]))
        zero_fraction = sum(scored.zero_advantage for scored in groups) / len(groups)
        if zero_fraction == 1.0:
            logger.debug(f"Step {step}: every group has zero advantage")
        return _mean(terms, self.params.config.dtype), mean_reward, zero_fraction

    def teacher_batch(self, batch, step):
        """Text-conditioned teacher rollouts, regenerated per visit or cached once"""
        config = self.config
        if config.teacher_refresh == 'epoch':
            return build_teacher_batch(
                self.params, batch, temperature=config.token_temperature, seed=config.seed,
                max_len=config.max_len, snapshot_step=step, threads=self.threads,
            )
        missing = [pair for pair in batch if pair.id not in self._teacher_cache]
        if missing:
            fresh = build_teacher_batch(
                self.params, missing, temperature=config.token_temperature, seed=config.seed,
                max_len=config.max_len, snapshot_step=0, threads=self.threads,
            )
            self._teacher_cache.update({r.prompt_id: r for r in fresh.rollouts})
        rollouts = [self._teacher_cache[pair.id] for pair in batch]
        return TeacherBatch(pairs=batch, rollouts=rollouts, snapshot_step=0, lengths=[r.length for r in rollouts])

    def train_step(self, step=None):
        """One update of the configured arm; returns its StepMetrics"""
        config = self.config
        step = self.step + 1 if step is None else step
        started = time.perf_counter()
        batch = self.sample_batch(step)
        dtype = self.params.config.dtype
        metrics = StepMetrics(step=step, method=config.arm)

        self.params.zero_grad()
        l_tok = l_seq = l_base = ops.zeros_scalar(dtype)
        if config.method in TOKEN_METHODS:
            l_tok, metrics.mean_kl = self.token_terms(batch, step)
        if config.method in SEQUENCE_METHODS:
            l_seq, metrics.mean_reward, metrics.zero_adv_fraction = self.sequence_terms(batch, step)
        if config.method in BASELINE_LOSSES:
            teacher = self.teacher_batch(batch, step)
            l_base = BASELINE_LOSSES[config.method](teacher, self.params)
            self.calls[f"{config.method}_loss"] += 1

        total = ops.add(ops.add(l_tok, ops.scale(l_seq, config.seq_weight)), l_base)
        metrics.l_tok, metrics.l_seq, metrics.l_base = l_tok.item(), l_seq.item(), l_base.item()
        metrics.total = metrics.l_tok + config.seq_weight * metrics.l_seq + metrics.l_base
        _check_finite(total.item(), 'Training loss', step)

        backward(total)
        grads = self.params.gradients()
        metrics.grad_norm = global_grad_norm(grads)
        optimizer_step(dict(self.params.items()), grads, self.state)
        self.calls['optimizer_step'] += 1
        self.params.zero_grad()

        metrics.wall_time = time.perf_counter() - started
        logger.debug(
            f"Step {step} [{metrics.method}]: total {metrics.total:.5f} (tok {metrics.l_tok:.5f}, "
            f"seq {metrics.l_seq:.5f}, base {metrics.l_base:.5f}) grad_norm {metrics.grad_norm:.4f}"
        )
        return metrics
