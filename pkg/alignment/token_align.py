"""
Token-level alignment: per-step reverse KL with top-K and positional weights.

Weights are schedules computed from the divergence values and then held
constant; the gradient flows only through D_t itself.
"""
import logging
from dataclasses import dataclass

import numpy as np

from autodiff import ops
from cord_lab.exceptions import ConfigError, RolloutError, ShapeError
from policy.model import forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignConfig:
    top_k: int = 20
    alpha: float = 2.0
    beta: float = 2.0
    weighting_enabled: bool = True

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError(f"top_k must be at least 1, got {self.top_k}")
        if self.alpha < 1:
            raise ConfigError(f"alpha must be at least 1, got {self.alpha}")
        if self.beta < 1:
            raise ConfigError(f"beta must be at least 1, got {self.beta}")


@dataclass(frozen=True)
class WeightVector:
    w_kl: np.ndarray
    w_pos: np.ndarray
    w: np.ndarray

    def __len__(self):
        return len(self.w)


def _check_vocab(first, second):
    if first.shape != second.shape:
        raise ShapeError(f"Distributions over different vocabularies: {first.shape} vs {second.shape}")


def reverse_kl_step(log_p_audio, log_p_text):
    """D_t = sum_v p_a(v) (log p_a(v) - log p_t(v)) for one step"""
    log_p_audio = np.asarray(log_p_audio, dtype=np.float64)
    log_p_text = np.asarray(log_p_text, dtype=np.float64)
    _check_vocab(log_p_audio, log_p_text)
    return float(np.sum(np.exp(log_p_audio) * (log_p_audio - log_p_text)))


def reverse_kl(audio_stream, text_stream):
    """Per-step reverse KL over two [T, V] log-distribution streams"""
    audio_stream = np.asarray(audio_stream, dtype=np.float64)
    text_stream = np.asarray(text_stream, dtype=np.float64)
    _check_vocab(audio_stream, text_stream)
    return np.sum(np.exp(audio_stream) * (audio_stream - text_stream), axis=-1)


def reverse_kl_tensor(audio_log_probs, text_log_probs):
    """Differentiable per-step reverse KL; the text side is a constant"""
    text = ops.as_tensor(np.asarray(text_log_probs, dtype=audio_log_probs.dtype))
    _check_vocab(audio_log_probs, text)
    return ops.row_sum(ops.mul(ops.exp(audio_log_probs), ops.sub(audio_log_probs, text)))


def uniform_kl(divergences):
    """Arithmetic mean of D_t; 0 for an empty trajectory"""
    divergences = np.asarray(divergences)
    if divergences.size == 0:
        return 0.0
    return float(np.sum(divergences) / divergences.size)


def topk_weights(divergences, top_k, alpha):
    """alpha on the K largest D_t (earlier position wins ties), 1 elsewhere"""
    divergences = np.asarray(divergences, dtype=np.float64)
    weights = np.ones(divergences.size)
    chosen = np.argsort(-divergences, kind='stable')[:min(top_k, divergences.size)]
    weights[chosen] = alpha
    return weights


def positional_weights(length, beta):
    """Linear decay from beta at the first step to 1 at the last"""
    if length <= 1:
        return np.ones(length)
    return beta - (beta - 1.0) * np.arange(length) / (length - 1)


def combine_weights(w_kl, w_pos):
    w_kl, w_pos = np.asarray(w_kl, dtype=np.float64), np.asarray(w_pos, dtype=np.float64)
    if w_kl.shape != w_pos.shape:
        raise ShapeError(f"Weight vectors of lengths {w_kl.size} and {w_pos.size}")
    return w_kl * w_pos


def compute_weights(divergences, config):
    divergences = np.asarray(divergences, dtype=np.float64)
    if not config.weighting_enabled:
        ones = np.ones(divergences.size)
        return WeightVector(w_kl=ones, w_pos=ones.copy(), w=ones.copy())
    w_kl = topk_weights(divergences, config.top_k, config.alpha)
    w_pos = positional_weights(divergences.size, config.beta)
    return WeightVector(w_kl=w_kl, w_pos=w_pos, w=combine_weights(w_kl, w_pos))


def token_objective(divergences, config):
    """sum_t w_t D_t over a divergence Tensor, weights frozen"""
    if divergences.data.size == 0:
        return ops.zeros_scalar(divergences.dtype)
    weights = compute_weights(divergences.data, config).w
    return ops.weighted_sum(divergences, weights)


def token_loss(trajectory, params, config):
    """
    Weighted reverse-KL loss of one rollout.

    Recomputes the audio stream with gradients on the trajectory's own
    prefixes and compares it with the recorded text stream. The rollout's
    ``divergences`` are refreshed as a side effect.
    """
    if trajectory.text_logprobs is None:
        raise RolloutError(f"Trajectory {trajectory.prompt_id} has no text stream")
    if trajectory.length == 0:
        trajectory.divergences = np.zeros(0)
        return ops.zeros_scalar(params.config.dtype)
    audio = forward(params, trajectory.condition, list(trajectory.tokens)[:-1])
    divergences = reverse_kl_tensor(audio, trajectory.text_logprobs)
    trajectory.divergences = divergences.data.astype(np.float64)
    return token_objective(divergences, config)
