"""
Off-policy baselines supervised along text-conditioned teacher rollouts.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from autodiff import ops
from cord_lab.exceptions import RolloutError, ShapeError
from cord_lab.seeding import derive_seed
from policy.model import Condition, forward, sequence_logprob
from rollouts.engine import map_ordered, teacher_reference

logger = logging.getLogger(__name__)

TEXT_ROLLOUT = 'text-rollout'


@dataclass
class TeacherBatch:
    pairs: list
    rollouts: list
    provenance: str = TEXT_ROLLOUT
    snapshot_step: int = 0
    lengths: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)


def build_teacher_batch(params, pairs, temperature=1.0, seed=0, max_len=200, snapshot_step=0, threads=None):
    """Sample one text-conditioned rollout per pair from the current parameters"""
    pairs = list(pairs)

    def rollout(pair):
        return teacher_reference(
            params, pair, decode_mode='sample', temperature=temperature, max_len=max_len,
            seed=derive_seed(seed, 'teacher', snapshot_step, pair.id),
        )

    rollouts = map_ordered(rollout, pairs, threads=threads)
    return TeacherBatch(
        pairs=pairs,
        rollouts=rollouts,
        snapshot_step=snapshot_step,
        lengths=[r.length for r in rollouts],
    )


def _check_batch(batch):
    if batch.provenance != TEXT_ROLLOUT:
        raise RolloutError(f"Baseline losses need text-rollout batches, got '{batch.provenance}'")
    if not batch.pairs:
        raise RolloutError("Empty teacher batch")


def sft_loss(batch, params):
    """Mean over the batch of -sum_t log p(y_t | y_<t, x_audio) on teacher tokens, EOS stop included"""
    _check_batch(batch)
    loss = None
    for pair, rollout in zip(batch.pairs, batch.rollouts):
        scored = rollout.scored_tokens
        if not scored:
            continue
        term = sequence_logprob(params, Condition.audio(pair), scored)
        loss = term if loss is None else ops.add(loss, term)
    if loss is None:
        return ops.zeros_scalar(params.config.dtype)
    return ops.scale(loss, -1.0 / len(batch))


def forward_kl(text_stream, audio_stream):
    """Per-step KL(p_text || p_audio) over [T, V] log-distribution streams"""
    text_stream = np.asarray(text_stream, dtype=np.float64)
    audio_stream = np.asarray(audio_stream, dtype=np.float64)
    if text_stream.shape != audio_stream.shape:
        raise ShapeError(f"Distributions over different vocabularies: {text_stream.shape} vs {audio_stream.shape}")
    return np.sum(np.exp(text_stream) * (text_stream - audio_stream), axis=-1)


def fkl_loss(batch, params):
    """
    Forward KL from the text to the audio policy on teacher-rollout states.

    Per rollout the step divergences are averaged; rollouts are then averaged
    over the batch. The text side is the recorded constant stream.
    """
    _check_batch(batch)
    loss = None
    for pair, rollout in zip(batch.pairs, batch.rollouts):
        if rollout.length == 0:
            continue
        audio = forward(params, Condition.audio(pair), list(rollout.tokens)[:-1])
        text = np.asarray(rollout.text_logprobs, dtype=audio.dtype)
        if text.shape != audio.shape:
            raise ShapeError(f"Teacher stream {text.shape} does not match student stream {audio.shape}")
        per_step = ops.row_sum(ops.mul(ops.as_tensor(np.exp(text)), ops.sub(ops.as_tensor(text), audio)))
        term = ops.scale(ops.total(per_step), 1.0 / rollout.length)
        loss = term if loss is None else ops.add(loss, term)
    if loss is None:
        return ops.zeros_scalar(params.config.dtype)
    return ops.scale(loss, 1.0 / len(batch))
