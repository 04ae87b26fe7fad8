import itertools
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from autodiff import ops
from autodiff.gradcheck import grad_check
from autodiff.tensor import Tensor, backward
from cord_lab.exceptions import ConfigError, RolloutError, ShapeError
from policy.model import Condition, ModelConfig, forward, init_params, sequence_logprob, step_distributions
from rollouts.engine import MAX_LEN_TERMINATION, RolloutGroup, replay
from tasks.encoding import NoiseSpec, make_pair
from tasks.programs import build_instance
from tasks.vocab import ANSWER, EOS

from .baselines import TeacherBatch, build_teacher_batch, fkl_loss, forward_kl, sft_loss
from .seq_align import (
    RewardLog,
    advantages,
    extract_answer,
    judge,
    judge_reward,
    score_group,
    sequence_loss,
)
from .token_align import (
    AlignConfig,
    combine_weights,
    compute_weights,
    positional_weights,
    reverse_kl,
    reverse_kl_step,
    reverse_kl_tensor,
    token_loss,
    token_objective,
    topk_weights,
    uniform_kl,
)


def tiny_params(seed=0):
    config = ModelConfig(d_model=16, n_layers=2, n_heads=2, context_size=48, max_output_len=16, precision='f64', init_std=0.2)
    return init_params(config, seed)


def sample_pair(pair_id='pair-000001', start=2):
    instance = build_instance(start, [('*', 3), ('+', 4)], 5)
    return make_pair(instance, NoiseSpec(p_sub=0.1, p_dup=0.1), np.random.default_rng(0), pair_id)


def random_log_distribution(rng, size):
    return np.log(rng.dirichlet(np.ones(size)))


class ReverseKlTestCase(SimpleTestCase):
    """Test cases for per-step reverse KL"""

    def test_identical(self):
        """KL of a distribution with itself is 0"""
        log_p = np.log([0.2, 0.3, 0.5])
        self.assertEqual(reverse_kl_step(log_p, log_p), 0.0)

    def test_known_value(self):
        """p_a=[0.5, 0.5], p_t=[0.25, 0.75] gives 0.5 ln(4/3)"""
        value = reverse_kl_step(np.log([0.5, 0.5]), np.log([0.25, 0.75]))
        self.assertAlmostEqual(value, 0.14384103622589045, delta=1e-15)

    def test_matches_naive_loop(self):
        """Vectorized divergence matches a double loop on 1000 random pairs"""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            log_a, log_t = random_log_distribution(rng, 34), random_log_distribution(rng, 34)
            naive = 0.0
            for v in range(34):
                naive += np.exp(log_a[v]) * (log_a[v] - log_t[v])
            value = reverse_kl_step(log_a, log_t)
            self.assertAlmostEqual(value, naive, delta=1e-12)
            self.assertGreater(value, 0.0)

    def test_stream_matches_steps(self):
        """Stream divergences equal per-step divergences"""
        rng = np.random.default_rng(1)
        audio = np.stack([random_log_distribution(rng, 8) for _ in range(5)])
        text = np.stack([random_log_distribution(rng, 8) for _ in range(5)])
        expected = [reverse_kl_step(a, t) for a, t in zip(audio, text)]
        assert_allclose(reverse_kl(audio, text), expected, rtol=0, atol=1e-15)
        assert_allclose(reverse_kl_tensor(Tensor(audio), text).data, expected, rtol=0, atol=1e-15)

    def test_vocab_mismatch(self):
        """Different vocabulary sizes are rejected"""
        with self.assertRaises(ShapeError):
            reverse_kl_step(np.log([0.5, 0.5]), np.log([0.2, 0.3, 0.5]))


class WeightTestCase(SimpleTestCase):
    """Test cases for top-K and positional weights"""

    def test_uniform_kl(self):
        """Mean of D, 0 when empty"""
        self.assertAlmostEqual(uniform_kl([0.2, 0.4]), 0.3, delta=1e-15)
        self.assertAlmostEqual(uniform_kl([0.7] * 6), 0.7, delta=1e-15)
        self.assertEqual(uniform_kl([]), 0.0)

    def test_topk_single(self):
        """K=1 picks the largest divergence"""
        assert_array_equal(topk_weights([0.1, 5.0, 0.2], 1, 2.0), [1.0, 2.0, 1.0])

    def test_topk_larger_than_length(self):
        """K >= T weights every step"""
        assert_array_equal(topk_weights(np.arange(10.0), 20, 2.0), np.full(10, 2.0))

    def test_topk_ties(self):
        """Ties go to earlier positions"""
        assert_array_equal(topk_weights([1.0, 1.0, 1.0], 2, 3.0), [3.0, 3.0, 1.0])

    def test_topk_count(self):
        """Exactly min(K, T) entries are alpha"""
        divergences = np.random.default_rng(2).exponential(size=30)
        self.assertEqual(int(np.sum(topk_weights(divergences, 20, 2.0) == 2.0)), 20)

    def test_positional(self):
        """beta=2, T=5 decays linearly to 1"""
        assert_array_equal(positional_weights(5, 2.0), [2.0, 1.75, 1.5, 1.25, 1.0])
        assert_array_equal(positional_weights(4, 1.0), np.ones(4))
        assert_array_equal(positional_weights(1, 2.0), [1.0])

    def test_combine(self):
        """Combined weights are the elementwise product"""
        assert_array_equal(combine_weights([1.0, 2.0], [2.0, 1.0]), [2.0, 2.0])
        assert_array_equal(combine_weights(np.ones(3), np.ones(3)), np.ones(3))
        with self.assertRaises(ShapeError):
            combine_weights([1.0], [1.0, 2.0])

    def test_weight_bounds(self):
        """1 <= w_t <= alpha * beta"""
        divergences = np.random.default_rng(3).exponential(size=40)
        weights = compute_weights(divergences, AlignConfig()).w
        self.assertTrue(np.all(weights >= 1.0))
        self.assertTrue(np.all(weights <= 4.0))
        self.assertEqual(compute_weights([9.0, 0.0], AlignConfig()).w[0], 4.0)

    def test_earlier_peak_never_loses_weight(self):
        """Moving the largest divergence earlier does not lower its weight"""
        divergences = np.array([0.1, 0.3, 0.2, 0.05, 2.0, 0.4])
        config = AlignConfig(top_k=2)
        before = compute_weights(divergences, config).w[4]
        moved = divergences.copy()
        moved[[1, 4]] = moved[[4, 1]]
        self.assertGreaterEqual(compute_weights(moved, config).w[1], before)

    def test_weighting_disabled(self):
        """OPD mode weights every step by 1"""
        weights = compute_weights([3.0, 1.0, 2.0], AlignConfig(weighting_enabled=False))
        assert_array_equal(weights.w, np.ones(3))

    def test_config_validation(self):
        """K, alpha and beta have lower bounds"""
        for values in ({'top_k': 0}, {'alpha': 0.5}, {'beta': 0.9}):
            with self.assertRaises(ConfigError):
                AlignConfig(**values)


class TokenLossTestCase(SimpleTestCase):
    """Test cases for the weighted token loss"""

    def setUp(self):
        self.params = tiny_params()
        self.pair = sample_pair()
        self.tokens = [1, 3, ANSWER, 3]

    def test_hand_example(self):
        """D=[1, 2], K=1, alpha=beta=2 gives 6"""
        loss = token_objective(Tensor([1.0, 2.0]), AlignConfig(top_k=1, alpha=2.0, beta=2.0))
        self.assertEqual(loss.item(), 6.0)

    def test_reduces_to_uniform(self):
        """With alpha=beta=1, loss / T equals the uniform mean bit for bit"""
        divergences = np.random.default_rng(4).exponential(size=17)
        loss = token_objective(Tensor(divergences), AlignConfig(top_k=5, alpha=1.0, beta=1.0))
        self.assertEqual(loss.item() / 17, uniform_kl(divergences))

    def test_empty_rollout(self):
        """T=0 contributes exactly 0"""
        trajectory = replay(self.params, self.pair, [])
        self.assertEqual(token_loss(trajectory, self.params, AlignConfig()).item(), 0.0)

    def test_identical_streams(self):
        """Matching streams give zero loss and zero gradient"""
        trajectory = replay(self.params, self.pair, self.tokens)
        trajectory.text_logprobs = trajectory.audio_logprobs.copy()
        loss = token_loss(trajectory, self.params, AlignConfig())
        self.assertEqual(loss.item(), 0.0)
        for grad in backward(loss).values():
            assert_allclose(grad, np.zeros_like(grad), atol=1e-12)
        self.params.zero_grad()

    def test_non_negative(self):
        """Loss is non-negative and records D_t on the trajectory"""
        trajectory = replay(self.params, self.pair, self.tokens)
        loss = token_loss(trajectory, self.params, AlignConfig())
        self.assertGreater(loss.item(), 0.0)
        self.assertEqual(trajectory.divergences.shape, (4,))
        assert_allclose(trajectory.divergences, reverse_kl(trajectory.audio_logprobs, trajectory.text_logprobs), atol=1e-12)

    def test_weights_are_constants(self):
        """Gradients equal those of a frozen-weight recomputation"""
        trajectory = replay(self.params, self.pair, self.tokens)
        config = AlignConfig(top_k=2)
        frozen_divergences = reverse_kl_tensor(
            forward(self.params, trajectory.condition, self.tokens[:-1]), trajectory.text_logprobs)
        weights = compute_weights(frozen_divergences.data, config).w
        frozen = {t: g.copy() for t, g in backward(ops.weighted_sum(frozen_divergences, weights)).items()}
        self.params.zero_grad()
        live = backward(token_loss(trajectory, self.params, config))
        self.params.zero_grad()
        self.assertEqual(set(live), set(frozen))
        for tensor, grad in live.items():
            assert_array_equal(grad, frozen[tensor])

    def test_gradient_check(self):
        """Token loss gradients match finite differences"""
        trajectory = replay(self.params, self.pair, self.tokens)
        report = grad_check(
            lambda: token_loss(trajectory, self.params, AlignConfig()),
            dict(self.params.items()), eps=1e-5, tolerance=1e-5, max_entries=3,
        )
        self.assertTrue(report.passed, report.summary_lines())

    def test_missing_text_stream(self):
        """Rollouts sampled without the teacher cannot be scored"""
        trajectory = replay(self.params, self.pair, self.tokens)
        trajectory.text_logprobs = None
        with self.assertRaises(RolloutError):
            token_loss(trajectory, self.params, AlignConfig())


class JudgeTestCase(SimpleTestCase):
    """Test cases for answer extraction and rewards"""

    def test_extract(self):
        """Answer follows the first marker"""
        self.assertEqual(extract_answer([4, 1, ANSWER, 1, EOS]), 1)
        self.assertIsNone(extract_answer([4, 1, 1]))
        self.assertIsNone(extract_answer([4, 1, ANSWER]))
        self.assertEqual(extract_answer([ANSWER, 2, ANSWER, 5]), 2)

    def test_extract_non_number(self):
        """Whatever token follows the marker is returned, numeric or not"""
        self.assertEqual(extract_answer([ANSWER, EOS]), EOS)
        self.assertEqual(extract_answer([3, ANSWER, ANSWER, 4]), ANSWER)
        self.assertEqual(judge_reward([ANSWER, EOS], [1, ANSWER, 3]), 0)

    def test_rewards(self):
        """Equal answers score 1, anything else 0"""
        self.assertEqual(judge_reward([1, ANSWER, 3], [2, ANSWER, 3]), 1)
        self.assertEqual(judge_reward([1, 3], [2, ANSWER, 3]), 0)
        self.assertEqual(judge_reward([1, ANSWER, 4], [2, ANSWER, 3]), 0)
        self.assertEqual(judge_reward([1], [2]), 0)

    def test_symmetric(self):
        """judge(y, y_hat) and judge(y_hat, y) agree"""
        samples = [[1, ANSWER, 3], [ANSWER, 3], [3, 3], [ANSWER], [2, ANSWER, 4, EOS]]
        for y, y_hat in itertools.product(samples, repeat=2):
            self.assertEqual(judge_reward(y, y_hat), judge_reward(y_hat, y))

    def test_verdict_fields(self):
        """Verdicts keep both extracted answers"""
        verdict = judge([ANSWER, 2], [ANSWER, 5])
        self.assertEqual((verdict.answer, verdict.reference_answer, verdict.reward), (2, 5, 0))


class AdvantageTestCase(SimpleTestCase):
    """Test cases for group-relative advantages"""

    def test_examples(self):
        """Reward minus group mean"""
        assert_array_equal(advantages([1, 0, 0, 1]), [0.5, -0.5, -0.5, 0.5])
        assert_array_equal(advantages([1, 1, 1, 1]), [0.0, 0.0, 0.0, 0.0])
        assert_array_equal(advantages([1, 0, 0, 0]), [0.75, -0.25, -0.25, -0.25])

    def test_zero_sum(self):
        """Advantages sum to zero for every reward pattern"""
        for size in (2, 4, 8):
            for pattern in itertools.product((0, 1), repeat=size):
                self.assertAlmostEqual(float(np.sum(advantages(pattern))), 0.0, delta=1e-12)

    def test_group_too_small(self):
        """A single reward has no group baseline"""
        with self.assertRaises(RolloutError):
            advantages([1])


class SequenceLossTestCase(SimpleTestCase):
    """Test cases for the policy-gradient loss"""

    def setUp(self):
        self.params = tiny_params(1)
        self.pair = sample_pair()
        members = [[1, ANSWER, 1], [2, 0, ANSWER, 3], [4, ANSWER, 1], [0]]
        self.group = RolloutGroup(pair=self.pair, trajectories=[replay(self.params, self.pair, m) for m in members])
        self.reference = replay(self.params, self.pair, [1, ANSWER, 1])

    def _with_advantages(self, values):
        self.group.advantages = np.asarray(values, dtype=np.float64)
        return self.group

    def test_score_group(self):
        """Scoring fills rewards, advantages and the zero-advantage flag"""
        score_group(self.group, self.reference)
        assert_array_equal(self.group.rewards, [1.0, 0.0, 1.0, 0.0])
        assert_array_equal(self.group.advantages, [0.5, -0.5, 0.5, -0.5])
        self.assertFalse(self.group.zero_advantage)
        self.assertEqual(self.group.trajectories[0].reward, 1.0)

    def test_equal_rewards(self):
        """All-equal rewards give zero loss and no gradient"""
        group = self._with_advantages(advantages([1, 1, 1, 1]))
        loss = sequence_loss(group, self.params)
        self.assertEqual(loss.item(), 0.0)
        self.assertEqual(backward(loss), {})

    def test_reward_shift_invariance(self):
        """Adding a constant to every reward leaves the loss unchanged"""
        rewards = np.array([1.0, 0.0, 0.0, 1.0])
        base = sequence_loss(self._with_advantages(advantages(rewards)), self.params).item()
        shifted = sequence_loss(self._with_advantages(advantages(rewards + 3.7)), self.params).item()
        self.assertAlmostEqual(base, shifted, delta=1e-10)

    def test_positive_advantage_raises_likelihood(self):
        """A descent step on the loss raises the favoured member's log-likelihood"""
        group = self._with_advantages([0.75, -0.25, -0.25, -0.25])
        favoured = group.trajectories[0]
        before = sequence_logprob(self.params, favoured.condition, favoured.scored_tokens).item()
        grads = backward(sequence_loss(group, self.params))
        for tensor, grad in grads.items():
            tensor.data = tensor.data - 1e-3 * grad
        self.params.zero_grad()
        after = sequence_logprob(self.params, favoured.condition, favoured.scored_tokens).item()
        self.assertGreater(after, before)

    def test_length_normalized(self):
        """The normalized variant divides each member by its scored length, EOS included"""
        group = self._with_advantages([0.5, -0.5, 0.0, 0.0])
        plain = sequence_loss(group, self.params).item()
        normalized = sequence_loss(group, self.params, length_normalized=True).item()
        first, second = group.trajectories[0], group.trajectories[1]
        lp1 = sequence_logprob(self.params, first.condition, first.tokens + (EOS,)).item()
        lp2 = sequence_logprob(self.params, second.condition, second.tokens + (EOS,)).item()
        self.assertAlmostEqual(plain, -(0.5 * lp1 - 0.5 * lp2) / 4, delta=1e-12)
        self.assertAlmostEqual(normalized, -(0.5 * lp1 / 4 - 0.5 * lp2 / 5) / 4, delta=1e-12)

    def test_gradient_check(self):
        """Sequence loss gradients match finite differences"""
        group = self._with_advantages([0.5, -0.5, 0.5, -0.5])
        report = grad_check(
            lambda: sequence_loss(group, self.params),
            dict(self.params.items()), eps=1e-5, tolerance=1e-5, max_entries=3,
        )
        self.assertTrue(report.passed, report.summary_lines())

    def test_reward_log(self):
        """Reward log rows carry the group's rewards and flag"""
        score_group(self.group, self.reference)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'rewards.csv'
            with RewardLog(path) as log:
                log.append(3, self.group)
            lines = path.read_text().splitlines()
        self.assertEqual(lines[0], 'step,prompt_id,rewards,advantages,zero_advantage_group')
        self.assertEqual(lines[1], '3,pair-000001,1;0;1;0,0.5;-0.5;0.5;-0.5,0')


class BaselineTestCase(SimpleTestCase):
    """Test cases for SFT and forward-KL baselines"""

    def setUp(self):
        self.params = tiny_params(2)
        self.pair = sample_pair()
        self.tokens = (2, 0, ANSWER, 0)

    def _batch(self, text_stream=None, tokens=None):
        tokens = self.tokens if tokens is None else tokens
        rollout = replay(self.params, self.pair, tokens)
        if text_stream is not None:
            rollout.text_logprobs = text_stream
        return TeacherBatch(pairs=[self.pair], rollouts=[rollout])

    def test_uniform_model(self):
        """A uniform model pays (T + 1) ln |V| for T tokens and the EOS stop"""
        self.params['head.w'].data[:] = 0.0
        self.params['head.b'].data[:] = 0.0
        loss = sft_loss(self._batch(), self.params).item()
        self.assertAlmostEqual(loss, 5 * np.log(self.params.config.output_vocab), delta=1e-12)

    def test_capped_rollout_has_no_eos_term(self):
        """A rollout cut at max_len is scored on its tokens alone"""
        self.params['head.w'].data[:] = 0.0
        self.params['head.b'].data[:] = 0.0
        batch = self._batch()
        batch.rollouts[0].terminated_by = MAX_LEN_TERMINATION
        loss = sft_loss(batch, self.params).item()
        self.assertAlmostEqual(loss, 4 * np.log(self.params.config.output_vocab), delta=1e-12)

    def test_eos_term(self):
        """The EOS term is -log p(EOS | y, x_audio) after the last teacher token"""
        batch = self._batch()
        rows = step_distributions(self.params, Condition.audio(self.pair), list(self.tokens))
        expected = -sum(rows[t, token] for t, token in enumerate(self.tokens + (EOS,)))
        self.assertAlmostEqual(sft_loss(batch, self.params).item(), expected, delta=1e-12)

    def test_certain_model(self):
        """A model certain of every teacher token pays nothing"""
        self.params['head.w'].data[:] = 0.0
        self.params['head.b'].data[:] = 0.0
        self.params['head.b'].data[5] = 1000.0
        batch = self._batch(tokens=(5, 5, 5))
        batch.rollouts[0].terminated_by = MAX_LEN_TERMINATION
        self.assertEqual(sft_loss(batch, self.params).item(), 0.0)

    def test_sft_empty_rollout(self):
        """Empty capped rollouts contribute 0; an immediate EOS still pays for the EOS"""
        batch = self._batch(tokens=())
        batch.rollouts[0].terminated_by = MAX_LEN_TERMINATION
        self.assertEqual(sft_loss(batch, self.params).item(), 0.0)
        self.params['head.w'].data[:] = 0.0
        self.params['head.b'].data[:] = 0.0
        loss = sft_loss(self._batch(tokens=()), self.params).item()
        self.assertAlmostEqual(loss, np.log(self.params.config.output_vocab), delta=1e-12)

    def test_fkl_identical(self):
        """Matching distributions give zero forward KL"""
        audio = step_distributions(self.params, Condition.audio(self.pair), list(self.tokens)[:-1])
        self.assertEqual(fkl_loss(self._batch(text_stream=audio), self.params).item(), 0.0)

    def test_fkl_known_value(self):
        """KL([0.25, 0.75] || [0.5, 0.5]) = 0.130812..."""
        value = forward_kl(np.log([[0.25, 0.75]]), np.log([[0.5, 0.5]]))[0]
        self.assertAlmostEqual(value, 0.25 * np.log(0.5) + 0.75 * np.log(1.5), delta=1e-15)
        self.assertAlmostEqual(value, 0.13081203594, delta=1e-10)

    def test_direction_matters(self):
        """Forward and reverse KL differ on asymmetric inputs"""
        p_text, p_audio = np.log([0.25, 0.75]), np.log([0.5, 0.5])
        self.assertNotAlmostEqual(forward_kl([p_text], [p_audio])[0], reverse_kl_step(p_audio, p_text), places=6)

    def test_fkl_matches_oracle(self):
        """Loss is the per-step mean of the numpy forward KL"""
        batch = self._batch()
        rollout = batch.rollouts[0]
        expected = float(np.mean(forward_kl(rollout.text_logprobs, rollout.audio_logprobs)))
        self.assertAlmostEqual(fkl_loss(batch, self.params).item(), expected, delta=1e-12)

    def test_fkl_naive_loop(self):
        """Forward KL matches a double loop on random pairs"""
        rng = np.random.default_rng(9)
        for _ in range(1000):
            log_t, log_a = random_log_distribution(rng, 12), random_log_distribution(rng, 12)
            naive = sum(np.exp(log_t[v]) * (log_t[v] - log_a[v]) for v in range(12))
            value = forward_kl([log_t], [log_a])[0]
            self.assertAlmostEqual(value, naive, delta=1e-12)
            self.assertGreater(value, 0.0)

    def test_gradient_checks(self):
        """SFT and forward-KL gradients match finite differences"""
        batch = self._batch()
        for loss_fn in (sft_loss, fkl_loss):
            report = grad_check(
                lambda: loss_fn(batch, self.params),
                dict(self.params.items()), eps=1e-5, tolerance=1e-5, max_entries=3,
            )
            self.assertTrue(report.passed, report.summary_lines())

    def test_provenance(self):
        """Only text-rollout batches are accepted"""
        batch = self._batch()
        batch.provenance = 'audio-rollout'
        with self.assertRaises(RolloutError):
            sft_loss(batch, self.params)

    def test_build_teacher_batch(self):
        """Teacher rollouts are text-conditioned and reproducible"""
        pairs = [self.pair, sample_pair('pair-000002', start=4)]
        first = build_teacher_batch(self.params, pairs, seed=3, max_len=8)
        second = build_teacher_batch(self.params, pairs, seed=3, max_len=8)
        self.assertEqual(first.provenance, 'text-rollout')
        self.assertEqual([r.tokens for r in first.rollouts], [r.tokens for r in second.rollouts])
        for rollout in first.rollouts:
            self.assertEqual(rollout.condition.modality, 'text')
