"""
Rollout sampling.

A Trajectory holds the sampled tokens (the terminating EOS is not part of
them; ``scored_tokens`` adds it back for likelihood objectives) and, for every
step t, the log-distributions that produced y_t. The audio stream is recorded
while sampling. The text stream is evaluated on the same prefixes y_<t
afterwards, as plain arrays, so no gradient can flow through it.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from django.conf import settings

from cord_lab.exceptions import RolloutError
from cord_lab.seeding import derive_seed
from policy.model import Condition, step_distributions
from tasks.datasets import read_jsonl, write_jsonl
from tasks.vocab import EOS

logger = logging.getLogger(__name__)

EOS_TERMINATION = 'eos'
MAX_LEN_TERMINATION = 'max_len'


def _empty_stream(params):
    return np.zeros((0, params.config.output_vocab), dtype=params.config.dtype)


@dataclass
class Trajectory:
    prompt_id: str
    tokens: tuple
    condition: object
    temperature: float
    terminated_by: str
    token_logprobs: np.ndarray
    audio_logprobs: np.ndarray = None
    text_logprobs: np.ndarray = None
    teacher_condition: object = None
    greedy: bool = False
    divergences: np.ndarray = None
    reward: float = None
    correct: bool = None

    @property
    def length(self):
        return len(self.tokens)

    @property
    def scored_tokens(self):
        """Tokens a likelihood is taken over; a rollout that stopped on EOS also emitted it"""
        if self.terminated_by == EOS_TERMINATION:
            return tuple(self.tokens) + (EOS,)
        return tuple(self.tokens)

    def __len__(self):
        return len(self.tokens)


@dataclass
class RolloutGroup:
    """N trajectories for one prompt, scored against a text-conditioned reference"""
    pair: object
    trajectories: list
    reference: object = None
    rewards: np.ndarray = None
    advantages: np.ndarray = None
    zero_advantage: bool = False
    verdicts: list = field(default_factory=list)

    @property
    def prompt_id(self):
        return self.pair.id

    @property
    def size(self):
        return len(self.trajectories)


def sample_token(log_probs, temperature, rng=None, greedy=False):
    """Draw one token from softmax(log_probs / temperature), or take the argmax"""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if greedy:
        return int(np.argmax(log_probs))
    if not temperature > 0:
        raise RolloutError(f"Temperature must be positive, got {temperature}")
    scaled = log_probs / temperature
    weights = np.exp(scaled - np.max(scaled))
    cumulative = np.cumsum(weights)
    draw = rng.random() * cumulative[-1]
    return int(min(np.searchsorted(cumulative, draw, side='right'), log_probs.size - 1))


def rollout_cap(params, condition, max_len):
    """Longest output the context leaves room for"""
    config = params.config
    return min(int(max_len), config.max_output_len, config.context_size - len(condition) - 2)


def decode(params, condition, temperature=1.0, max_len=200, rng=None, greedy=False):
    """
    Autoregressive decoding from ``condition``.

    Returns (tokens, per-step log-distributions, per-step token log-probs,
    termination reason). Stops at EOS or once the cap is reached.
    """
    if not greedy and not temperature > 0:
        raise RolloutError(f"Temperature must be positive, got {temperature}")
    if not greedy and rng is None:
        raise RolloutError("Sampled decoding needs a random generator")
    cap = rollout_cap(params, condition, max_len)
    if cap < 0:
        raise RolloutError(f"Condition of length {len(condition)} leaves no room in the context")
    tokens, rows, picked = [], [], []
    terminated_by = MAX_LEN_TERMINATION
    while len(tokens) < cap:
        distribution = step_distributions(params, condition, tokens)[-1]
        token = sample_token(distribution, temperature, rng=rng, greedy=greedy)
        if token == EOS:
            terminated_by = EOS_TERMINATION
            break
        tokens.append(token)
        rows.append(distribution)
        picked.append(distribution[token])
    stream = np.stack(rows) if rows else _empty_stream(params)
    return tokens, stream, np.asarray(picked, dtype=np.float64), terminated_by


def text_stream(params, pair, tokens):
    """Text-conditioned log-distributions on the prefixes of ``tokens``"""
    if not tokens:
        return _empty_stream(params)
    return step_distributions(params, Condition.text(pair), list(tokens)[:-1])


def sample_rollout(params, pair, temperature=1.0, max_len=200, seed=None, record_teacher=True, greedy=False, rng=None):
    """On-policy trajectory sampled from the audio-conditioned policy"""
    if rng is None and not greedy:
        rng = np.random.default_rng(seed)
    condition = Condition.audio(pair)
    tokens, stream, picked, terminated_by = decode(
        params, condition, temperature=temperature, max_len=max_len, rng=rng, greedy=greedy,
    )
    trajectory = Trajectory(
        prompt_id=pair.id,
        tokens=tuple(tokens),
        condition=condition,
        temperature=float(temperature),
        terminated_by=terminated_by,
        token_logprobs=picked,
        audio_logprobs=stream,
        greedy=greedy,
    )
    if record_teacher:
        trajectory.teacher_condition = Condition.text(pair)
        trajectory.text_logprobs = text_stream(params, pair, tokens)
    logger.debug(f"Rollout {pair.id}: T={len(tokens)} ({terminated_by})")
    return trajectory


def replay(params, pair, tokens, temperature=1.0):
    """Trajectory record for fixed tokens, both streams evaluated on their prefixes"""
    tokens = tuple(int(t) for t in tokens)
    condition = Condition.audio(pair)
    if tokens:
        audio = step_distributions(params, condition, list(tokens)[:-1])
        picked = audio[np.arange(len(tokens)), list(tokens)].astype(np.float64)
    else:
        audio, picked = _empty_stream(params), np.zeros(0)
    return Trajectory(
        prompt_id=pair.id,
        tokens=tokens,
        condition=condition,
        temperature=float(temperature),
        terminated_by=EOS_TERMINATION,
        token_logprobs=picked,
        audio_logprobs=audio,
        text_logprobs=text_stream(params, pair, tokens),
        teacher_condition=Condition.text(pair),
    )


def teacher_reference(params, pair, decode_mode='greedy', temperature=1.0, max_len=200, seed=None, rng=None):
    """
    Text-conditioned trajectory.

    Only ``pair.x_text`` enters the model. ``decode_mode`` is 'greedy' or
    'sample'.
    """
    if decode_mode not in ('greedy', 'sample'):
        raise RolloutError(f"Unknown decode mode '{decode_mode}'")
    greedy = decode_mode == 'greedy'
    if rng is None and not greedy:
        rng = np.random.default_rng(seed)
    condition = Condition.text(pair)
    tokens, stream, picked, terminated_by = decode(
        params, condition, temperature=temperature, max_len=max_len, rng=rng, greedy=greedy,
    )
    return Trajectory(
        prompt_id=pair.id,
        tokens=tuple(tokens),
        condition=condition,
        temperature=float(temperature),
        terminated_by=terminated_by,
        token_logprobs=picked,
        text_logprobs=stream,
        greedy=greedy,
    )


def sample_group(params, pair, n, temperature=1.5, seed=0, max_len=200, member_seeds=None):
    """N audio-conditioned trajectories with independent derived seeds"""
    if n < 2:
        raise RolloutError(f"Group size must be at least 2, got {n}")
    if member_seeds is None:
        member_seeds = [derive_seed(seed, 'group', pair.id, index) for index in range(n)]
    if len(member_seeds) != n:
        raise RolloutError(f"{len(member_seeds)} member seeds for a group of {n}")
    trajectories = [
        sample_rollout(params, pair, temperature=temperature, max_len=max_len, seed=member, record_teacher=False)
        for member in member_seeds
    ]
    return RolloutGroup(pair=pair, trajectories=trajectories)


def map_ordered(fn, items, threads=None):
    """fn over items on the worker pool, results in input order"""
    items = list(items)
    threads = settings.CORD_THREADS if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as executor:
        return list(executor.map(fn, items))


def trajectory_record(trajectory):
    divergences = trajectory.divergences
    return {
        'prompt_id': trajectory.prompt_id,
        'tokens': list(trajectory.tokens),
        'divergences': [] if divergences is None else [float(d) for d in divergences],
        'reward': trajectory.reward,
        'correct': trajectory.correct,
        'temperature': trajectory.temperature,
        'terminated_by': trajectory.terminated_by,
    }


def dump_trajectories(path, trajectories):
    """Line-delimited dump consumed by the analysis pipeline"""
    path = write_jsonl(path, (trajectory_record(t) for t in trajectories))
    logger.info(f"Dumped {len(trajectories)} trajectories to {path}")
    return path


def load_trajectories(path):
    """Trajectories from a dump; distributions are not stored, only D_t"""
    trajectories = []
    for record in read_jsonl(path):
        trajectories.append(Trajectory(
            prompt_id=record['prompt_id'],
            tokens=tuple(record['tokens']),
            condition=None,
            temperature=record.get('temperature', 1.0),
            terminated_by=record.get('terminated_by', EOS_TERMINATION),
            token_logprobs=np.zeros(0),
            divergences=np.asarray(record.get('divergences', []), dtype=np.float64),
            reward=record.get('reward'),
            correct=record.get('correct'),
        ))
    return trajectories
