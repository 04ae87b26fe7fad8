import tempfile
from decimal import Decimal
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from cord_lab.artifacts import read_csv
from cord_lab.exceptions import ConfigError
from evaluation.evaluate import EvalReport
from tasks.encoding import NoiseSpec, make_pair
from tasks.programs import generate_instance
from tasks.vocab import EOS

from .config import TrainConfig, parse_value, resolve_config, resolved_text, with_values
from .experiments import ExperimentResult, compare, stability_report, sweep
from .metrics import METRIC_FIELDS, StepMetrics
from .trainer import Trainer, audio_subset, pretrain

TINY = dict(d_model=16, n_layers=2, n_heads=2, context_size=64, precision='f64', init_std=0.2, max_len=6)

PIPELINE_CONFIG = """\
# tiny end-to-end run
seed=11
precision=f64
d_model=16
n_layers=2
n_heads=2
context_size=64
init_std=0.2
max_len=8
n_examples=30
aux_examples=12
max_program_length=2
pretrain_steps=2
pretrain_batch_size=4
batch_size=2
group_size=2
eval_steps=2
eval_size=4
"""


def tiny_config(**values):
    return TrainConfig(**{**TINY, 'batch_size': 2, 'group_size': 2, 'max_steps': 2, **values})


def train_pairs(count=6, seed=0):
    rng = np.random.default_rng(seed)
    noise = NoiseSpec(p_sub=0.1, p_dup=0.1)
    return [
        make_pair(generate_instance(1 + index % 2, 7, rng=rng), noise, rng, f"pair-{index:06d}", 'train')
        for index in range(count)
    ]


def base_params(config, seed=0):
    params, _ = pretrain(with_values(config, pretrain_steps=1, pretrain_batch_size=2), train_pairs(seed=seed))
    return params


def report(label, step, accuracies):
    evaluation = EvalReport(label=label, step=step)
    for task, (text, audio) in accuracies.items():
        evaluation.accuracies[(task, 'text')] = text
        evaluation.accuracies[(task, 'audio')] = audio
    return evaluation


class ConfigTestCase(SimpleTestCase):
    """Test cases for config resolution"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'run.cfg'

    def test_defaults(self):
        """Defaults match the reference hyperparameters"""
        config = TrainConfig()
        self.assertEqual((config.lr, config.batch_size, config.max_steps), (3e-5, 8, 3000))
        self.assertEqual((config.top_k, config.alpha, config.beta, config.group_size), (20, 2.0, 2.0, 4))
        self.assertEqual((config.token_temperature, config.grpo_temperature), (1.0, 1.5))
        self.assertEqual(config.eval_steps, (500, 1000, 3000))

    def test_default_precision_from_settings(self):
        """An unset precision falls back to CORD_DEFAULT_PRECISION"""
        with self.settings(CORD_DEFAULT_PRECISION='f64'):
            self.assertEqual(TrainConfig().precision, 'f64')
        self.assertEqual(TrainConfig(precision='f32').precision, 'f32')
        with self.assertRaises(ConfigError):
            TrainConfig(precision='f16')

    def test_precedence(self):
        """File < flags < overrides, later overrides win"""
        self.path.write_text("seed=3\nmethod=opd\nalpha=1.5\n")
        config = resolve_config(self.path)
        self.assertEqual((config.seed, config.method, config.alpha), (3, 'opd', 1.5))

        config = resolve_config(self.path, flags={'seed': 5, 'method': None})
        self.assertEqual((config.seed, config.method), (5, 'opd'))

        config = resolve_config(self.path, flags={'seed': 5}, overrides=['seed=7', 'method=grpo', 'seed=9'])
        self.assertEqual((config.seed, config.method), (9, 'grpo'))

    def test_unknown_key(self):
        """Unknown keys are rejected in files and overrides"""
        self.path.write_text("sede=3\n")
        with self.assertRaises(ConfigError):
            resolve_config(self.path)
        with self.assertRaises(ConfigError):
            resolve_config(overrides=['not_a_key=1'])
        with self.assertRaises(ConfigError):
            resolve_config(overrides=['seed'])

    def test_missing_file(self):
        """A missing config file is a config error"""
        with self.assertRaises(ConfigError):
            resolve_config(Path(self.tmp.name) / 'absent.cfg')

    def test_typed_values(self):
        """Values are cast to the field's type"""
        self.assertEqual(parse_value('eval_steps', '10, 20'), (10, 20))
        self.assertEqual(parse_value('split_ratios', '0.5,0.25,0.25'), (0.5, 0.25, 0.25))
        self.assertIs(parse_value('weighting_enabled', 'off'), False)
        self.assertEqual(parse_value('lr', '1e-4'), 1e-4)
        with self.assertRaises(ConfigError):
            parse_value('batch_size', 'eight')
        with self.assertRaises(ConfigError):
            parse_value('length_normalized', 'maybe')

    def test_validation(self):
        """Out-of-range values fail on construction"""
        for values in ({'method': 'ppo'}, {'group_size': 1}, {'token_temperature': 0.0},
                       {'reference_mode': 'beam'}, {'eval_steps': (0,)}, {'audio_fraction': 0.0}):
            with self.assertRaises(ConfigError):
                TrainConfig(**values)

    def test_arm_labels(self):
        """cord without weighting reports as the GRPO + OPD ablation; opd is always unweighted"""
        self.assertEqual(TrainConfig(method='cord').arm, 'cord')
        self.assertEqual(TrainConfig(method='cord', weighting_enabled=False).arm, 'grpo+opd')
        self.assertFalse(TrainConfig(method='opd').align_config().weighting_enabled)
        self.assertTrue(TrainConfig(method='cord').align_config().weighting_enabled)

    def test_resolved_text(self):
        """The resolved snapshot lists every field and parses back to the same config"""
        config = resolve_config(overrides=['seed=7', 'eval_steps=1,2'])
        text = resolved_text(config)
        self.assertIn('seed=7\n', text)
        self.assertIn('eval_steps=1,2\n', text)
        self.path.write_text(text)
        self.assertEqual(resolve_config(self.path), config)


class TrainerTestCase(SimpleTestCase):
    """Test cases for the alignment training step"""

    def test_grpo_never_touches_token_loss(self):
        """The grpo arm runs only the sequence objective, one optimizer step per call"""
        config = tiny_config(method='grpo')
        trainer = Trainer(base_params(config), config, train_pairs())
        trainer.train_step()
        trainer.train_step()
        self.assertEqual(trainer.calls['token_loss'], 0)
        self.assertEqual(trainer.calls['sequence_loss'], 4)
        self.assertEqual(trainer.calls['optimizer_step'], 2)
        self.assertEqual(trainer.step, 2)

    def test_opd_never_touches_sequence_loss(self):
        """The opd arm runs only the token objective"""
        config = tiny_config(method='opd')
        trainer = Trainer(base_params(config), config, train_pairs())
        metrics = trainer.train_step()
        self.assertEqual(trainer.calls['sequence_loss'], 0)
        self.assertEqual(trainer.calls['token_loss'], 2)
        self.assertEqual(trainer.calls['optimizer_step'], 1)
        self.assertIsNone(metrics.mean_reward)
        self.assertEqual(metrics.l_seq, 0.0)

    def test_cord_single_update(self):
        """cord combines both objectives into one optimizer step"""
        config = tiny_config(method='cord', seq_weight=0.5)
        trainer = Trainer(base_params(config), config, train_pairs())
        metrics = trainer.train_step()
        self.assertEqual(trainer.calls['token_loss'], 2)
        self.assertEqual(trainer.calls['sequence_loss'], 2)
        self.assertEqual(trainer.calls['optimizer_step'], 1)
        self.assertEqual(metrics.total, metrics.l_tok + 0.5 * metrics.l_seq + metrics.l_base)
        self.assertTrue(0.0 <= metrics.zero_adv_fraction <= 1.0)

    def test_baseline_arms(self):
        """sft and fkl train on text-conditioned teacher rollouts only"""
        for method in ('sft', 'fkl'):
            config = tiny_config(method=method)
            trainer = Trainer(base_params(config), config, train_pairs())
            metrics = trainer.train_step()
            self.assertEqual(trainer.calls[f"{method}_loss"], 1)
            self.assertEqual(trainer.calls['token_loss'] + trainer.calls['sequence_loss'], 0)
            self.assertEqual(metrics.total, metrics.l_base)

    def test_zero_loss_step_applies_decay_only(self):
        """With every rollout empty the update is pure weight decay"""
        config = tiny_config(method='opd', lr=1e-3, weight_decay=0.1)
        params = base_params(config)
        params['head.w'].data[...] = 0.0
        params['head.b'].data[...] = 0.0
        params['head.b'].data[EOS] = 1000.0
        before = {name: tensor.data.copy() for name, tensor in params.items()}

        trainer = Trainer(params, config, train_pairs())
        metrics = trainer.train_step()
        self.assertEqual(metrics.total, 0.0)
        self.assertEqual(metrics.grad_norm, 0.0)
        self.assertEqual(metrics.mean_kl, 0.0)
        for name, tensor in params.items():
            expected = before[name] * tensor.dtype.type(1.0 - config.lr * config.weight_decay)
            assert_array_equal(tensor.data, expected)

    def test_deterministic(self):
        """Same seed, same metrics and weights"""
        config = tiny_config(method='cord')
        runs = []
        for _ in range(2):
            trainer = Trainer(base_params(config), config, train_pairs())
            runs.append((trainer.train_step().row(), trainer.params))
        self.assertEqual(runs[0][0], runs[1][0])
        self.assertTrue(runs[0][1].equals(runs[1][1]))

    def test_batch_sampling(self):
        """Batches are drawn without replacement from a per-step stream"""
        config = tiny_config(batch_size=4)
        trainer = Trainer(base_params(config), config, train_pairs())
        batch = trainer.sample_batch(3)
        self.assertEqual(len({pair.id for pair in batch}), 4)
        self.assertEqual([p.id for p in batch], [p.id for p in trainer.sample_batch(3)])

    def test_empty_split(self):
        """Training needs data"""
        with self.assertRaises(ConfigError):
            Trainer(None, tiny_config(), [])

    def test_metrics_row(self):
        """Wall time stays out of the metrics row"""
        row = StepMetrics(step=1, method='cord', wall_time=3.0).row()
        self.assertEqual(list(row), METRIC_FIELDS)
        self.assertEqual(row['mean_reward'], '')


class PretrainTestCase(SimpleTestCase):
    """Test cases for base-model pretraining"""

    def test_audio_subset(self):
        """The audio pool is a fixed sorted subset"""
        subset = audio_subset(100, 0.1, seed=4)
        self.assertEqual(len(subset), 10)
        assert_array_equal(subset, np.sort(subset))
        assert_array_equal(subset, audio_subset(100, 0.1, seed=4))
        self.assertEqual(len(audio_subset(3, 0.1, seed=4)), 1)

    def test_history(self):
        """One finite metrics row per step"""
        config = tiny_config(pretrain_steps=3, pretrain_batch_size=2)
        params, history = pretrain(config, train_pairs())
        self.assertEqual([m.step for m in history], [1, 2, 3])
        self.assertTrue(all(np.isfinite(m.total) for m in history))
        self.assertEqual(history[0].l_aux, 0.0)

    def test_empty_split(self):
        with self.assertRaises(ConfigError):
            pretrain(tiny_config(), [])


class ReportTestCase(SimpleTestCase):
    """Test cases for stability and sweep summaries"""

    def test_stability_flags(self):
        """Only drops beyond two points below base count as collapse"""
        base = report('base', 0, {'all': (90.0, 50.0)})
        evaluations = [
            report('cord', 500, {'all': (90.0, 48.5)}),
            report('cord', 1000, {'all': (90.0, 47.9)}),
            report('cord', 3000, {'all': (90.0, 60.0)}),
        ]
        rows = stability_report(base, evaluations)
        self.assertEqual([row['collapsed'] for row in rows], [0, 1, 0])
        self.assertEqual(rows[1]['delta'], '-2.10')

    def test_sweep_relative_delta(self):
        """Sweep deltas are measured against the run at 1.0"""
        base = report('base', 0, {'all': (80.0, 40.0)})
        audio = {1.0: 50.0, 2.0: 56.5, 2.5: 49.0}

        def fake_experiment(config, out_dir):
            final = report('cord', config.max_steps, {'all': (80.0, audio[config.alpha])})
            self.assertEqual(config.alpha, config.beta)
            return ExperimentResult(out_dir=out_dir, arm='cord', base_eval=base, evaluations=[final])

        with tempfile.TemporaryDirectory() as tmp, \
                mock.patch('training.experiments.run_experiment', side_effect=fake_experiment):
            result = sweep(TrainConfig(), [2.0, 1.0, 2.5], tmp)
            rows = read_csv(Path(tmp) / 'sweep.csv')
        self.assertEqual(len(result.rows), 3)
        by_value = {row['value']: row for row in rows}
        self.assertEqual(by_value['1']['relative_delta'], '0.00')
        self.assertEqual(by_value['2']['relative_delta'], '6.50')
        self.assertEqual(by_value['2.5']['relative_delta'], '-1.00')
        self.assertEqual(by_value['2']['delta_base'], '23.50')

    def test_compare_seed_medians(self):
        """Cross-arm gaps and the ablation table use the median over seeds"""
        base = report('base', 0, {'all': (80.0, 40.0)})
        finals = {'cord': [60.0, 70.0, 65.0], 'grpo+opd': [50.0, 52.0, 58.0], 'sft': [30.0, 35.0, 39.0]}
        seen = []

        def fake_experiment(config, out_dir):
            seen.append((config.arm, config.seed))
            self.assertEqual(config.weighting_enabled, config.arm != 'grpo+opd')
            evaluations = [
                report(config.arm, 1, {'all': (80.0, 40.0 + config.seed)}),
                report(config.arm, 2, {'all': (80.0, finals[config.arm][config.seed])}),
            ]
            return ExperimentResult(out_dir=out_dir, arm=config.arm, base_eval=base, evaluations=evaluations)

        with tempfile.TemporaryDirectory() as tmp, \
                mock.patch('training.experiments.run_experiment', side_effect=fake_experiment):
            result = compare(TrainConfig(), ['cord', 'grpo+opd', 'sft'], [0, 1, 2, 1], tmp)
            rows = read_csv(Path(tmp) / 'ablation.csv')
            gap_rows = read_csv(Path(tmp) / 'gap_report.csv')
        self.assertEqual(len(seen), 9)
        self.assertEqual(result.seeds, (0, 1, 2))
        self.assertEqual(result.gaps.reductions['cord'], Decimal('62.5'))
        self.assertEqual(result.gaps.reductions['grpo+opd'], Decimal('30.0'))
        self.assertEqual(result.gaps.reductions['sft'], Decimal('-12.5'))
        self.assertEqual([row['gap'] for row in gap_rows], ['40.00', '15.00', '28.00', '45.00'])
        final_rows = {row['arm']: row for row in rows if row['step'] == '2'}
        self.assertEqual(final_rows['cord']['audio_accuracy'], '65.00')
        self.assertEqual(final_rows['cord']['audio_min'], '60.00')
        self.assertEqual(final_rows['grpo+opd']['audio_max'], '58.00')
        self.assertEqual(final_rows['sft']['collapsed'], '1')
        self.assertEqual([row['audio_accuracy'] for row in rows if row['step'] == '1'], ['41.00'] * 3)
        self.assertIn('cord', result.summary())

    def test_compare_unknown_arm(self):
        """Arms outside the known set are a configuration error"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                compare(TrainConfig(), ['cord', 'ppo'], [0], tmp)


class CordCommandTestCase(SimpleTestCase):
    """Test cases for the cord management command"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def cord(self, *args):
        out = StringIO()
        call_command('cord', *[str(arg) for arg in args], stdout=out)
        return out.getvalue()

    def test_unknown_subcommand(self):
        """Usage errors exit 1"""
        with self.assertRaises(CommandError) as caught:
            self.cord('bogus')
        self.assertEqual(caught.exception.returncode, 1)

    def test_bad_override(self):
        """Config errors exit 1"""
        with self.assertRaises(CommandError) as caught:
            self.cord('grad-check', '--out', self.root, '--override', 'alpha_beta=2')
        self.assertEqual(caught.exception.returncode, 1)

    def test_compare_rejects_unknown_arm(self):
        """An unknown arm in --arms exits 1 before any training"""
        with self.assertRaises(CommandError) as caught:
            self.cord('compare', '--out', self.root, '--arms', 'cord,ppo', '--seeds', '0,1')
        self.assertEqual(caught.exception.returncode, 1)
        self.assertFalse((self.root / 'cord').exists())

    def test_missing_checkpoint(self):
        """A missing checkpoint is an I/O failure, exit 3"""
        config = self.root / 'run.cfg'
        config.write_text(f"base_checkpoint={self.root / 'absent.ckpt'}\ndata_dir={self.root / 'data'}\n")
        with self.assertRaises(CommandError) as caught:
            self.cord('eval', '--config', config, '--out', self.root / 'eval')
        self.assertEqual(caught.exception.returncode, 3)

    def test_grad_check(self):
        """Every loss passes the finite-difference check"""
        output = self.cord('grad-check', '--out', self.root, '--max-entries', 2)
        self.assertIn('Gradient check passed', output)
        text = (self.root / 'gradcheck.txt').read_text()
        for name in ('L_tok', 'L_seq', 'L_SFT', 'L_FKL'):
            self.assertIn(f"[{name}] ok", text)

    def test_grad_check_f32(self):
        """Single-precision gradients of every loss pass against the f64 oracle"""
        output = self.cord('grad-check', '--out', self.root, '--precision', 'f32', '--max-entries', 3)
        self.assertIn('Gradient check passed', output)
        text = (self.root / 'gradcheck.txt').read_text()
        self.assertIn('precision=f32 oracle=f64', text)
        for name in ('L_tok', 'L_seq', 'L_SFT', 'L_FKL'):
            self.assertIn(f"[{name}] ok", text)

    def test_pipeline(self):
        """Data, pretraining and two identical training runs end to end"""
        config = self.root / 'run.cfg'
        config.write_text(
            PIPELINE_CONFIG
            + f"data_dir={self.root / 'data'}\nbase_checkpoint={self.root / 'base' / 'base.ckpt'}\n"
        )
        self.cord('generate-data', '--config', config)
        self.assertTrue((self.root / 'data' / 'train.jsonl').exists())
        self.assertTrue((self.root / 'data' / 'aux_test.jsonl').exists())

        self.cord('pretrain', '--config', config, '--out', self.root / 'base')
        self.assertTrue((self.root / 'base' / 'base.ckpt').exists())
        self.assertEqual(len(read_csv(self.root / 'base' / 'pretrain_metrics.csv')), 2)

        for run in ('a', 'b'):
            self.cord('train', '--config', config, '--method', 'cord', '--steps', 2, '--out', self.root / run)
        for name in ('metrics.csv', 'final.ckpt', 'rewards.csv', 'evals.csv'):
            self.assertEqual((self.root / 'a' / name).read_bytes(), (self.root / 'b' / name).read_bytes())

        run = self.root / 'a'
        rows = read_csv(run / 'metrics.csv')
        self.assertEqual([row['step'] for row in rows], ['1', '2'])
        self.assertEqual(len(read_csv(run / 'timings.csv')), 2)
        for name in ('step_2.ckpt', 'gap_report.csv', 'gap_report.txt', 'stability.csv', 'config.resolved'):
            self.assertTrue((run / name).exists(), name)
        self.assertIn('max_steps=2\n', (run / 'config.resolved').read_text())

        output = self.cord('eval', '--config', config, '--checkpoint', run / 'final.ckpt', '--out', self.root / 'eval')
        self.assertIn('final: text', output)
        self.assertTrue((self.root / 'eval' / 'gap_report.csv').exists())

        self.cord('analyze', '--config', config, '--out', self.root / 'analysis', '--bins', 5)
        for name in ('kl_histogram.csv', 'kl_tokens.csv', 'kl_summary.txt', 'trajectories.jsonl'):
            self.assertTrue((self.root / 'analysis' / name).exists(), name)
