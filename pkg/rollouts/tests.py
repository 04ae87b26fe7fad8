import dataclasses
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from cord_lab.exceptions import RolloutError, VocabularyError
from policy.model import Condition, ModelConfig, init_params, step_distributions
from tasks.encoding import NoiseSpec, make_pair
from tasks.programs import build_instance
from tasks.vocab import EOS

from .engine import (
    dump_trajectories,
    load_trajectories,
    map_ordered,
    sample_group,
    sample_rollout,
    sample_token,
    teacher_reference,
)


def tiny_params(seed=0):
    config = ModelConfig(d_model=16, n_layers=2, n_heads=2, context_size=48, max_output_len=16, precision='f64', init_std=0.2)
    return init_params(config, seed)


def sample_pair(pair_id='pair-000001'):
    instance = build_instance(2, [('*', 3), ('+', 4)], 5)
    return make_pair(instance, NoiseSpec(p_sub=0.1, p_dup=0.1), np.random.default_rng(0), pair_id)


class SampleTokenTestCase(SimpleTestCase):
    """Test cases for temperature sampling"""

    def setUp(self):
        self.log_probs = np.log(np.array([0.1, 0.2, 0.3, 0.4]))

    def test_greedy(self):
        """Greedy decoding takes the argmax without a generator"""
        self.assertEqual(sample_token(self.log_probs, 1.0, greedy=True), 3)

    def test_bad_temperature(self):
        """Non-positive temperatures are rejected"""
        with self.assertRaises(RolloutError):
            sample_token(self.log_probs, 0.0, rng=np.random.default_rng(0))

    def test_frequencies_match_scaled_distribution(self):
        """50k draws match softmax(log p / 1.5) within 4 sigma"""
        rng = np.random.default_rng(123)
        draws = 50_000
        counts = np.bincount([sample_token(self.log_probs, 1.5, rng=rng) for _ in range(draws)], minlength=4)
        scaled = np.exp(self.log_probs / 1.5)
        expected = scaled / scaled.sum()
        sigma = np.sqrt(expected * (1.0 - expected) / draws)
        self.assertTrue(np.all(np.abs(counts / draws - expected) <= 4 * sigma), counts / draws)


class RolloutTestCase(SimpleTestCase):
    """Test cases for on-policy rollouts"""

    def setUp(self):
        self.params = tiny_params()
        self.pair = sample_pair()

    def test_deterministic(self):
        """Same seed gives the same trajectory"""
        first = sample_rollout(self.params, self.pair, max_len=8, seed=4)
        second = sample_rollout(self.params, self.pair, max_len=8, seed=4)
        self.assertEqual(first.tokens, second.tokens)
        assert_array_equal(first.audio_logprobs, second.audio_logprobs)

    def test_greedy_needs_no_seed(self):
        """Greedy rollouts are reproducible without a seed"""
        first = sample_rollout(self.params, self.pair, max_len=8, greedy=True)
        second = sample_rollout(self.params, self.pair, max_len=8, greedy=True)
        self.assertEqual(first.tokens, second.tokens)

    def test_length_cap(self):
        """Rollouts never exceed max_len"""
        for seed in range(5):
            trajectory = sample_rollout(self.params, self.pair, max_len=3, seed=seed)
            self.assertLessEqual(trajectory.length, 3)
            if trajectory.length == 3:
                self.assertEqual(trajectory.terminated_by, 'max_len')

    def test_scored_tokens(self):
        """An EOS stop is scored as one more token, a max_len cut is not"""
        for seed in range(6):
            trajectory = sample_rollout(self.params, self.pair, max_len=4, seed=seed)
            if trajectory.terminated_by == 'eos':
                self.assertEqual(trajectory.scored_tokens, tuple(trajectory.tokens) + (EOS,))
            else:
                self.assertEqual(trajectory.scored_tokens, tuple(trajectory.tokens))
        capped = dataclasses.replace(trajectory, tokens=(1, 2), terminated_by='max_len')
        self.assertEqual(capped.scored_tokens, (1, 2))
        self.assertEqual(dataclasses.replace(capped, terminated_by='eos').scored_tokens, (1, 2, EOS))

    def test_streams_share_prefixes(self):
        """Both streams are evaluated on the sampled prefixes y_<t"""
        trajectory = sample_rollout(self.params, self.pair, max_len=8, seed=1)
        length = trajectory.length
        self.assertEqual(trajectory.audio_logprobs.shape, (length, self.params.config.output_vocab))
        self.assertEqual(trajectory.text_logprobs.shape, trajectory.audio_logprobs.shape)
        if length:
            prefix = list(trajectory.tokens)[:-1]
            assert_array_equal(trajectory.audio_logprobs, step_distributions(self.params, Condition.audio(self.pair), prefix))
            assert_array_equal(trajectory.text_logprobs, step_distributions(self.params, Condition.text(self.pair), prefix))
            assert_allclose(np.exp(trajectory.text_logprobs).sum(axis=1), np.ones(length), atol=1e-6)

    def test_token_logprobs(self):
        """Recorded token log-probs are read from the audio stream"""
        trajectory = sample_rollout(self.params, self.pair, max_len=8, seed=2)
        for t, token in enumerate(trajectory.tokens):
            self.assertEqual(trajectory.token_logprobs[t], trajectory.audio_logprobs[t, token])

    def test_without_teacher(self):
        """record_teacher=False skips the text stream"""
        trajectory = sample_rollout(self.params, self.pair, max_len=8, seed=2, record_teacher=False)
        self.assertIsNone(trajectory.text_logprobs)


class TeacherReferenceTestCase(SimpleTestCase):
    """Test cases for text-conditioned references"""

    def setUp(self):
        self.params = tiny_params(1)
        self.pair = sample_pair()

    def test_reads_text_only(self):
        """Audio tokens never reach the model"""
        broken = dataclasses.replace(self.pair, x_audio=(999,))
        reference = teacher_reference(self.params, broken, max_len=8)
        self.assertEqual(reference.condition.modality, 'text')
        self.assertIsNone(reference.audio_logprobs)
        with self.assertRaises(VocabularyError):
            sample_rollout(self.params, broken, max_len=8, seed=0)

    def test_sampled_reference_deterministic(self):
        """Sampled references repeat under the same seed"""
        first = teacher_reference(self.params, self.pair, decode_mode='sample', max_len=8, seed=3)
        second = teacher_reference(self.params, self.pair, decode_mode='sample', max_len=8, seed=3)
        self.assertEqual(first.tokens, second.tokens)

    def test_unknown_mode(self):
        """Only greedy and sample modes exist"""
        with self.assertRaises(RolloutError):
            teacher_reference(self.params, self.pair, decode_mode='beam')


class GroupTestCase(SimpleTestCase):
    """Test cases for rollout groups"""

    def setUp(self):
        self.params = tiny_params(2)
        self.pair = sample_pair()

    def test_group_size(self):
        """N=4 gives four trajectories"""
        group = sample_group(self.params, self.pair, 4, seed=0, max_len=8)
        self.assertEqual(group.size, 4)
        self.assertEqual(group.prompt_id, self.pair.id)

    def test_group_too_small(self):
        """Groups need at least two members"""
        with self.assertRaises(RolloutError):
            sample_group(self.params, self.pair, 1, seed=0)

    def test_forced_seeds(self):
        """Identical member seeds give identical members"""
        group = sample_group(self.params, self.pair, 3, max_len=8, member_seeds=[7, 7, 7])
        self.assertEqual(len({t.tokens for t in group.trajectories}), 1)

    def test_group_deterministic(self):
        """A fixed master seed reproduces the group"""
        first = sample_group(self.params, self.pair, 4, seed=11, max_len=8)
        second = sample_group(self.params, self.pair, 4, seed=11, max_len=8)
        self.assertEqual([t.tokens for t in first.trajectories], [t.tokens for t in second.trajectories])


class PlumbingTestCase(SimpleTestCase):
    """Test cases for the worker pool and trajectory dumps"""

    def test_map_ordered(self):
        """Results keep input order on the thread pool"""
        self.assertEqual(map_ordered(lambda x: x * x, range(10), threads=3), [x * x for x in range(10)])

    def test_dump_round_trip(self):
        """Dumped divergences and flags load back"""
        params = tiny_params(3)
        trajectory = sample_rollout(params, sample_pair(), max_len=6, seed=5)
        trajectory.divergences = np.linspace(0.0, 1.0, trajectory.length)
        trajectory.reward = 1.0
        trajectory.correct = False
        with tempfile.TemporaryDirectory() as tmp:
            path = dump_trajectories(Path(tmp) / 'trajectories.jsonl', [trajectory])
            (loaded,) = load_trajectories(path)
        self.assertEqual(loaded.tokens, trajectory.tokens)
        assert_array_equal(loaded.divergences, trajectory.divergences)
        self.assertEqual(loaded.reward, 1.0)
        self.assertFalse(loaded.correct)
