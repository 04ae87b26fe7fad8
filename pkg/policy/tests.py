import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from autodiff import ops
from autodiff.gradcheck import grad_check
from autodiff.tensor import backward
from cord_lab.exceptions import ArtifactIOError, CheckpointError, ConfigError, ShapeError, VocabularyError

from .checkpoint import MAGIC, encode_checkpoint, load_checkpoint, save_checkpoint
from .model import (
    AUDIO,
    TEXT,
    Condition,
    ModelConfig,
    aux_log_probs,
    forward,
    init_params,
    sequence_logprob,
    step_distributions,
)


def tiny_config(**overrides):
    values = dict(
        d_model=16, n_layers=2, n_heads=2, context_size=48, max_output_len=16,
        precision='f64', init_std=0.2,
    )
    values.update(overrides)
    return ModelConfig(**values)


class InitTestCase(SimpleTestCase):
    """Test cases for parameter initialisation"""

    def test_same_seed_identical(self):
        """Same config and seed give bit-identical parameters"""
        config = tiny_config()
        self.assertTrue(init_params(config, 3).equals(init_params(config, 3)))

    def test_seed_changes_params(self):
        """A different seed changes at least one tensor"""
        config = tiny_config()
        self.assertFalse(init_params(config, 3).equals(init_params(config, 4)))

    def test_parameter_count(self):
        """d=16, L=2, vocab 64 matches the hand count"""
        config = tiny_config(text_vocab=64, audio_vocab=64, output_vocab=64, context_size=32)
        d, vocab, context, layers = 16, 64, 32, 2
        embeddings = 3 * vocab * d + 2 * d + d + context * d
        block = 4 * d * d + d + 2 * d + d * 4 * d + 4 * d + 4 * d * d + d + 2 * d
        head = 2 * d + d * vocab + vocab + d * 3 + 3
        self.assertEqual(init_params(config, 0).parameter_count(), embeddings + layers * block + head)
        self.assertEqual(init_params(config, 0).parameter_count(), 11267)

    def test_biases_and_gains(self):
        """Biases start at zero and layer-norm gains at one"""
        params = init_params(tiny_config(), 1)
        assert_array_equal(params['head.b'].data, np.zeros(params.config.output_vocab))
        assert_array_equal(params['block1.ln2.gamma'].data, np.ones(16))

    def test_context_budget(self):
        """Context smaller than the output cap is rejected"""
        with self.assertRaises(ConfigError):
            ModelConfig(context_size=100, max_output_len=200)

    def test_heads_divide_width(self):
        """d_model must split evenly across heads"""
        with self.assertRaises(ConfigError):
            ModelConfig(d_model=10, n_heads=4)


class ForwardTestCase(SimpleTestCase):
    """Test cases for forward and sequence_logprob"""

    def setUp(self):
        self.params = init_params(tiny_config(), 7)
        self.text = Condition(TEXT, (4, 32, 3, 35, 7))
        self.audio = Condition(AUDIO, (9, 9, 21, 4, 4, 4, 30, 12))

    def test_empty_prefix(self):
        """No prefix gives one distribution"""
        self.assertEqual(forward(self.params, self.text).shape, (1, self.params.config.output_vocab))

    def test_causality(self):
        """Appending a token leaves earlier distributions bit-identical"""
        short = step_distributions(self.params, self.audio, [1, 5, 2])
        longer = step_distributions(self.params, self.audio, [1, 5, 2, 33])
        self.assertEqual(longer.shape[0], 5)
        assert_array_equal(longer[:4], short)

    def test_causality_long_prefix(self):
        """Every shorter prefix of a 150-token rollout reproduces its rows exactly, f32 and f64"""
        rng = np.random.default_rng(3)
        for precision in ('f32', 'f64'):
            params = init_params(ModelConfig(precision=precision), 11)
            condition = Condition(AUDIO, tuple(int(t) for t in rng.integers(0, 36, size=20)))
            prefix = [int(t) for t in rng.integers(0, 33, size=150)]
            full = step_distributions(params, condition, prefix)
            for k in (0, 1, 6, 22, 54, 63, 64, 65, 100, 128, 149):
                assert_array_equal(step_distributions(params, condition, prefix[:k]), full[:k + 1])

    def test_normalized(self):
        """Every step distribution sums to 1 within 1e-9"""
        for condition in (self.text, self.audio):
            log_probs = step_distributions(self.params, condition, [3, 0, 32, 1])
            assert_allclose(np.exp(log_probs).sum(axis=1), np.ones(5), atol=1e-9)

    def test_single_token(self):
        """T=1 log-prob is the first step's entry"""
        value = sequence_logprob(self.params, self.text, [6]).item()
        self.assertEqual(value, step_distributions(self.params, self.text)[0, 6])

    def test_matches_naive_loop(self):
        """Sum of per-step entries matches a step-by-step recomputation"""
        y = [2, 11, 32, 11, 33]
        naive = sum(step_distributions(self.params, self.audio, y[:t])[-1, y[t]] for t in range(len(y)))
        self.assertAlmostEqual(sequence_logprob(self.params, self.audio, y).item(), naive, delta=1e-10)

    def test_chain_rule_split(self):
        """logprob(y_1..T) = logprob(y_1..k) + remaining step terms"""
        y = [5, 1, 32, 1, 33]
        rows = step_distributions(self.params, self.text, y[:-1])
        head = sequence_logprob(self.params, self.text, y[:2]).item()
        rest = sum(rows[t, y[t]] for t in range(2, len(y)))
        self.assertAlmostEqual(sequence_logprob(self.params, self.text, y).item(), head + rest, delta=1e-12)

    def test_out_of_alphabet(self):
        """Tokens outside their alphabet are rejected"""
        with self.assertRaises(VocabularyError):
            forward(self.params, Condition(TEXT, (40,)))
        with self.assertRaises(VocabularyError):
            forward(self.params, self.text, [34])

    def test_context_overflow(self):
        """Sequences longer than the context are rejected"""
        with self.assertRaises(ShapeError):
            forward(self.params, self.audio, [1] * 40)

    def test_empty_sequence(self):
        """sequence_logprob needs at least one token"""
        with self.assertRaises(ShapeError):
            sequence_logprob(self.params, self.text, [])

    def test_shared_parameters(self):
        """Text and audio conditioning train the same parameter set"""
        total = ops.add(sequence_logprob(self.params, self.text, [1, 2]), sequence_logprob(self.params, self.audio, [1, 2]))
        backward(total)
        self.assertIsNotNone(self.params['text_emb'].grad)
        self.assertIsNotNone(self.params['audio_emb'].grad)
        self.assertIsNotNone(self.params['head.w'].grad)
        self.params.zero_grad()

    def test_aux_head(self):
        """Auxiliary head gives a normalized 3-way distribution"""
        log_probs = aux_log_probs(self.params, self.audio).data
        self.assertEqual(log_probs.shape, (1, 3))
        self.assertAlmostEqual(float(np.exp(log_probs).sum()), 1.0, delta=1e-12)

    def test_gradient_check(self):
        """sequence_logprob gradients match finite differences"""
        y = [3, 0, 32, 0]
        report = grad_check(
            lambda: sequence_logprob(self.params, self.audio, y),
            dict(self.params.items()), eps=1e-5, tolerance=1e-5, max_entries=3,
        )
        self.assertTrue(report.passed, report.summary_lines())


class CheckpointTestCase(SimpleTestCase):
    """Test cases for the CORDCKPT format"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.config = tiny_config(precision='f32')
        self.params = init_params(self.config, 5)

    def test_round_trip(self):
        """Saved parameters load back bit-identical"""
        path = save_checkpoint(self.params, self.root / 'base.ckpt')
        loaded = load_checkpoint(path, self.config)
        self.assertTrue(loaded.equals(self.params))
        self.assertEqual(loaded['tok_emb'].dtype, np.float32)

    def test_byte_identical(self):
        """Two saves of the same parameters write the same bytes"""
        self.assertEqual(encode_checkpoint(self.params), encode_checkpoint(init_params(self.config, 5)))
        self.assertTrue(encode_checkpoint(self.params).startswith(MAGIC))

    def test_bad_magic(self):
        """Files without the magic are rejected"""
        path = self.root / 'junk.ckpt'
        path.write_bytes(b'NOTACKPT' + encode_checkpoint(self.params)[8:])
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_bad_version(self):
        """Unknown format versions are rejected"""
        payload = bytearray(encode_checkpoint(self.params))
        payload[8] = 9
        path = self.root / 'v9.ckpt'
        path.write_bytes(bytes(payload))
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_config_mismatch(self):
        """Loading into a different layout is rejected"""
        path = save_checkpoint(self.params, self.root / 'base.ckpt')
        with self.assertRaises(CheckpointError):
            load_checkpoint(path, tiny_config(precision='f32', d_model=32))

    def test_truncated(self):
        """Truncated files are rejected"""
        path = self.root / 'cut.ckpt'
        path.write_bytes(encode_checkpoint(self.params)[:-10])
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self):
        """A missing checkpoint is an I/O error naming the path"""
        with self.assertRaises(ArtifactIOError):
            load_checkpoint(self.root / 'absent.ckpt')
