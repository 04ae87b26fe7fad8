"""
Sequence-level alignment: exact-match judge, group-relative advantages and
the policy-gradient loss (no KL penalty, no ratio clipping).
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from autodiff import ops
from cord_lab.exceptions import ArtifactIOError, RolloutError
from policy.model import sequence_logprob
from tasks.vocab import ANSWER

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class JudgeVerdict:
    answer: int = None
    reference_answer: int = None
    reward: int = 0


def extract_answer(tokens):
    """Token right after the first ANSWER marker, or None"""
    tokens = [int(token) for token in tokens]
    try:
        position = tokens.index(ANSWER)
    except ValueError:
        return None
    if position + 1 >= len(tokens):
        return None
    return tokens[position + 1]


def judge(y, y_hat):
    answer, reference = extract_answer(y), extract_answer(y_hat)
    reward = int(answer is not None and answer == reference)
    return JudgeVerdict(answer=answer, reference_answer=reference, reward=reward)


def judge_reward(y, y_hat):
    """1 iff both sequences carry the same answer"""
    return judge(y, y_hat).reward


def advantages(rewards):
    """A_i = r_i - mean(r), no variance normalization"""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise RolloutError(f"Group-relative advantages need at least 2 rewards, got {rewards.size}")
    return rewards - np.mean(rewards)


def score_group(group, reference):
    """Judge every member against the reference and fill the group's advantages"""
    group.reference = reference
    group.verdicts = [judge(trajectory.tokens, reference.tokens) for trajectory in group.trajectories]
    group.rewards = np.array([verdict.reward for verdict in group.verdicts], dtype=np.float64)
    group.advantages = advantages(group.rewards)
    group.zero_advantage = bool(np.all(group.rewards == group.rewards[0]))
    for trajectory, reward in zip(group.trajectories, group.rewards):
        trajectory.reward = float(reward)
    return group


def sequence_loss(group, params, length_normalized=False):
    """
    -(1/N) sum_i A_i log p(y_i | x_audio), advantages held constant.

    The likelihood covers the EOS a member stopped on. Members with zero
    advantage or nothing to score add nothing. With ``length_normalized`` each
    log-likelihood is divided by the number of scored tokens.
    """
    if group.advantages is None:
        raise RolloutError(f"Group {group.prompt_id} has not been scored")
    size = group.size
    loss = None
    for trajectory, advantage in zip(group.trajectories, group.advantages):
        scored = trajectory.scored_tokens
        if advantage == 0.0 or not scored:
            continue
        log_likelihood = sequence_logprob(params, trajectory.condition, scored)
        factor = -float(advantage) / size
        if length_normalized:
            factor /= len(scored)
        term = ops.scale(log_likelihood, factor)
        loss = term if loss is None else ops.add(loss, term)
    return loss if loss is not None else ops.zeros_scalar(params.config.dtype)


class RewardLog:
    """Append-only CSV of per-group rewards"""
    HEADER = ['step', 'prompt_id', 'rewards', 'advantages', 'zero_advantage_group']

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(self.path, 'w', encoding='utf-8', newline='')
        except OSError as e:
            raise ArtifactIOError(self.path, f"cannot open reward log ({e.strerror or e})") from e
        self._writer = csv.writer(self._handle, lineterminator='\n')
        self._writer.writerow(self.HEADER)
        self.zero_groups = 0
        self.groups = 0

    def append(self, step, group):
        self.groups += 1
        self.zero_groups += int(group.zero_advantage)
        self._writer.writerow([
            step,
            group.prompt_id,
            ';'.join(f"{r:g}" for r in group.rewards),
            ';'.join(repr(float(a)) for a in group.advantages),
            int(group.zero_advantage),
        ])

    def close(self):
        self._handle.close()
        if self.groups:
            logger.info(f"Reward log {self.path}: {self.zero_groups}/{self.groups} zero-advantage groups")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
