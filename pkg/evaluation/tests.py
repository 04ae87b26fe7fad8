import math
import tempfile
from collections import Counter
from decimal import Decimal
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from cord_lab.artifacts import read_csv
from cord_lab.exceptions import AnalysisError
from policy.model import ModelConfig, init_params
from rollouts.engine import Trajectory
from tasks.encoding import AuxInstance, NoiseSpec, make_pair
from tasks.programs import build_instance, generate_instance
from tasks.vocab import ANSWER, EOS

from .analysis import (
    KlRecord,
    analyze_trajectories,
    divergence_rollouts,
    divergence_summary,
    kl_histogram,
    kl_profile_by_correctness,
    percentile,
    position_correlation,
    records_from_trajectories,
    token_frequency_by_kl,
)
from .evaluate import (
    EvalReport,
    evaluate,
    evaluate_aux,
    evaluate_tasks,
    gap_report,
    modality_gap,
    relative_reduction,
    write_gap_report,
)


def tiny_params(seed=0):
    config = ModelConfig(d_model=16, n_layers=2, n_heads=2, context_size=64, max_output_len=16, precision='f64', init_std=0.2)
    return init_params(config, seed)


def pairs_mod(modulus, count, seed=0):
    rng = np.random.default_rng(seed)
    noise = NoiseSpec(p_sub=0.1, p_dup=0.1)
    return [
        make_pair(generate_instance(1 + index % 4, modulus, rng=rng), noise, rng, f"pair-{index:06d}", 'test')
        for index in range(count)
    ]


def records_for(values, tokens=None, length=10):
    tokens = tokens if tokens is not None else [0] * len(values)
    return [
        KlRecord(prompt_id=f"p{index // length}", position=index % length + 1, length=length,
                 divergence=float(value), token=int(token))
        for index, (value, token) in enumerate(zip(values, tokens))
    ]


def report(label, text, audio):
    evaluation = EvalReport(label=label)
    for task in text:
        evaluation.accuracies[(task, 'text')] = text[task]
        evaluation.accuracies[(task, 'audio')] = audio[task]
    return evaluation


class EvaluateTestCase(SimpleTestCase):
    """Test cases for accuracy evaluation"""

    def test_ground_truth_decoder(self):
        """Emitting the targets verbatim scores 100"""
        pairs = pairs_mod(7, 20)
        self.assertEqual(evaluate(None, pairs, 'audio', decode=lambda pair: pair.target), 100.0)

    def test_random_answers(self):
        """Uniform answers over Z_7 score about 14.3 on 1000 items"""
        pairs = pairs_mod(7, 1000)
        rng = np.random.default_rng(0)
        accuracy = evaluate(None, pairs, 'text', decode=lambda pair: [ANSWER, int(rng.integers(7)), EOS], threads=1)
        self.assertAlmostEqual(accuracy, 100.0 / 7, delta=3.0)

    def test_missing_answer(self):
        """Outputs without an answer marker score 0"""
        pairs = pairs_mod(5, 10)
        self.assertEqual(evaluate(None, pairs, 'audio', decode=lambda pair: pair.target[:-3]), 0.0)

    def test_greedy_deterministic(self):
        """Greedy evaluation repeats exactly"""
        params, pairs = tiny_params(), pairs_mod(5, 6)
        first = evaluate(params, pairs, 'audio', max_len=6)
        self.assertEqual(first, evaluate(params, pairs, 'audio', max_len=6))
        self.assertTrue(0.0 <= first <= 100.0)

    def test_empty(self):
        """Empty datasets are rejected"""
        with self.assertRaises(AnalysisError):
            evaluate(None, [], 'audio', decode=lambda pair: ())

    def test_task_buckets(self):
        """Reports cover every bucket in both modalities"""
        params, pairs = tiny_params(1), pairs_mod(5, 8)
        evaluation = evaluate_tasks(params, pairs, max_len=6, label='base')
        self.assertEqual(evaluation.tasks, ['short', 'long', 'all'])
        for task in evaluation.tasks:
            for modality in ('text', 'audio'):
                self.assertTrue(0.0 <= evaluation.accuracy(task, modality) <= 100.0)
        self.assertEqual(evaluation.counts['all'], 8)
        self.assertEqual(evaluation.counts['short'] + evaluation.counts['long'], 8)

    def test_aux_head(self):
        """A head that always says 'mid' scores the share of mid items"""
        params = tiny_params(2)
        params['aux.w'].data[:] = 0.0
        params['aux.b'].data[:] = [0.0, 5.0, 0.0]
        items = [AuxInstance(id=f"aux-{i}", x_audio=(1, 2, 3), label=label, split='test')
                 for i, label in enumerate(['low', 'mid', 'mid', 'high'])]
        self.assertEqual(evaluate_aux(params, items), 50.0)


class GapReportTestCase(SimpleTestCase):
    """Test cases for the modality gap report"""

    def test_exact_gap(self):
        """44.46 - 38.06 is exactly 6.40"""
        self.assertEqual(str(modality_gap(44.46, 38.06)), '6.40')
        self.assertEqual(modality_gap(51.2, 51.2), 0)

    def test_relative_reduction(self):
        """Base gap 15.25 closed to 8.90 is a 41.6% reduction"""
        self.assertEqual(relative_reduction(15.25, 8.90), Decimal('41.6'))
        self.assertIsNone(relative_reduction(0, 3.0))

    def test_report(self):
        """Per-task gaps, averages and reductions"""
        base = report('base', {'short': 50.0, 'long': 40.0}, {'short': 30.0, 'long': 20.0})
        cord = report('cord', {'short': 52.0, 'long': 41.0}, {'short': 45.0, 'long': 30.0})
        gaps = gap_report(base, {'cord': cord})
        self.assertEqual(gaps.tasks, ['short', 'long'])
        self.assertEqual(gaps.base_gap, Decimal('20.00'))
        self.assertEqual(gaps.averages['cord'], Decimal('7.50'))
        self.assertEqual(gaps.reductions['cord'], Decimal('62.5'))
        self.assertEqual(gaps.reductions['base'], Decimal('0.0'))
        self.assertIn('cord', gaps.as_text())

    def test_raw_float_accuracies(self):
        """Unrounded accuracies such as 100 * 46 / 78 are taken at two decimals"""
        base = report('base', {'all': 100 * 46 / 78}, {'all': 100 * 23 / 78})
        method = report('cord', {'all': 46.0}, {'all': 100 * 2 / 3})
        gaps = gap_report(base, {'cord': method})
        self.assertEqual([str(row.gap) for row in gaps.rows], ['29.48', '-7.70'])
        self.assertEqual([str(row.audio) for row in gaps.rows], ['29.49', '66.67'])
        self.assertEqual(gaps.reductions['cord'], Decimal('126.1'))
        self.assertNotIn('58.974', gaps.as_text())
        self.assertEqual(str(modality_gap(58.974358974358976, 38.0)), '20.97')

    def test_missing_base(self):
        """A report without the base evaluation is an error"""
        with self.assertRaises(AnalysisError):
            gap_report(None, {})
        with self.assertRaises(AnalysisError):
            gap_report(EvalReport(label='base', accuracies={('all', 'audio'): 10.0}), {})

    def test_written_files(self):
        """CSV rows carry exact decimal gaps"""
        base = report('base', {'all': 44.46}, {'all': 30.0})
        method = report('cord', {'all': 45.0}, {'all': 38.06})
        with tempfile.TemporaryDirectory() as tmp:
            write_gap_report(gap_report(base, {'cord': method}), tmp)
            rows = read_csv(Path(tmp) / 'gap_report.csv')
            self.assertTrue((Path(tmp) / 'gap_report.txt').exists())
        self.assertEqual([row['gap'] for row in rows], ['14.46', '6.40'])


class PercentileTestCase(SimpleTestCase):
    """Test cases for nearest-rank percentiles"""

    def test_one_to_hundred(self):
        """q=80 over 1..100 is 80"""
        self.assertEqual(percentile(np.arange(1, 101), 80), 80.0)

    def test_constant(self):
        """Every percentile of a constant sample is that constant"""
        for q in (0, 25, 50, 80, 100):
            self.assertEqual(percentile([0.3] * 7, q), 0.3)

    def test_sort_oracle(self):
        """Matches indexing into the sorted sample"""
        values = np.random.default_rng(0).exponential(size=10_000)
        ordered = sorted(values)
        for q in (1, 10, 50, 80, 99, 100):
            self.assertEqual(percentile(values, q), ordered[math.ceil(q * 10_000 / 100) - 1])

    def test_monotone(self):
        """Percentiles never decrease with q"""
        values = np.random.default_rng(1).normal(size=500)
        results = [percentile(values, q) for q in range(0, 101, 5)]
        self.assertEqual(results, sorted(results))

    def test_bad_inputs(self):
        """Empty samples and q outside [0, 100] are rejected"""
        with self.assertRaises(AnalysisError):
            percentile([], 50)
        with self.assertRaises(AnalysisError):
            percentile([1.0], 101)


class HistogramTestCase(SimpleTestCase):
    """Test cases for the divergence histogram"""

    def test_counts_sum(self):
        """Bin counts add up to the record count"""
        values = np.random.default_rng(2).exponential(size=10_000)
        values[:50] = 0.0
        histogram = kl_histogram(records_for(values), bins=20)
        self.assertEqual(histogram.total, 10_000)
        self.assertEqual(histogram.edges[0], 0.0)
        self.assertEqual(histogram.counts[0], 50)
        self.assertEqual(histogram.threshold, percentile(values, 80))

    def test_degenerate(self):
        """Constant and all-zero samples still bin every record"""
        self.assertEqual(kl_histogram(records_for([0.4] * 9)).total, 9)
        self.assertEqual(kl_histogram(records_for([0.0] * 9)).total, 9)

    def test_empty(self):
        """No records, no histogram"""
        with self.assertRaises(AnalysisError):
            kl_histogram([])


class CorrelationTestCase(SimpleTestCase):
    """Test cases for position correlation"""

    def test_decreasing(self):
        """Strictly decreasing D over positions gives -1"""
        self.assertAlmostEqual(position_correlation(records_for(np.arange(10, 0, -1))), -1.0, delta=1e-12)

    def test_permutation_null(self):
        """Shuffled divergences are uncorrelated with position"""
        values = np.random.default_rng(3).permutation(np.random.default_rng(4).exponential(size=10_000))
        self.assertLess(abs(position_correlation(records_for(values, length=50))), 0.05)

    def test_formula_oracle(self):
        """Matches the textbook formula"""
        records = records_for(np.random.default_rng(5).exponential(size=1000), length=25)
        x = [float(r.position) for r in records]
        y = [r.divergence for r in records]
        mx, my = sum(x) / len(x), sum(y) / len(y)
        sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
        sxx = sum((a - mx) ** 2 for a in x)
        syy = sum((b - my) ** 2 for b in y)
        self.assertAlmostEqual(position_correlation(records), sxy / math.sqrt(sxx * syy), delta=1e-12)

    def test_zero_variance(self):
        """Constant divergences or a single record have no correlation"""
        with self.assertRaises(AnalysisError):
            position_correlation(records_for([0.5] * 10))
        with self.assertRaises(AnalysisError):
            position_correlation(records_for([0.5]))


class TokenFrequencyTestCase(SimpleTestCase):
    """Test cases for token tallies by divergence region"""

    def test_single_token(self):
        """One token tops both regions"""
        frequency = token_frequency_by_kl(records_for(np.arange(20.0), tokens=[7] * 20))
        self.assertEqual(frequency.high[0][0], 7)
        self.assertEqual(frequency.low[0][0], 7)

    def test_top_percentile(self):
        """q=100 leaves the high region empty"""
        frequency = token_frequency_by_kl(records_for(np.arange(20.0)), q=100)
        self.assertEqual(frequency.high, [])
        self.assertEqual(sum(count for _, count in frequency.low), 20)

    def test_tally_oracle(self):
        """Counts match a direct tally"""
        rng = np.random.default_rng(6)
        values, tokens = rng.exponential(size=10_000), rng.integers(0, 34, size=10_000)
        records = records_for(values, tokens=tokens)
        frequency = token_frequency_by_kl(records, q=80)
        threshold = percentile(values, 80)
        high = Counter(int(t) for v, t in zip(values, tokens) if v > threshold)
        low = Counter(int(t) for v, t in zip(values, tokens) if v <= threshold)
        self.assertEqual(dict(frequency.high), dict(high))
        self.assertEqual(dict(frequency.low), dict(low))
        counts = [count for _, count in frequency.high]
        self.assertEqual(counts, sorted(counts, reverse=True))


class DivergenceSummaryTestCase(SimpleTestCase):
    """Test cases for summaries and rollout records"""

    def test_right_skew(self):
        """Exponential divergences are right-skewed"""
        summary = divergence_summary(records_for(np.random.default_rng(7).exponential(size=2000)))
        self.assertTrue(summary.right_skewed)
        self.assertEqual(summary.n, 2000)

    def test_record_position(self):
        """Positions lie in [1, T]"""
        with self.assertRaises(AnalysisError):
            KlRecord(prompt_id='p', position=4, length=3, divergence=0.1, token=0)

    def test_profile_by_correctness(self):
        """Early-position means split by final correctness"""
        trajectories = [
            Trajectory('a', (1, 2, 3, 4), None, 1.0, 'eos', np.zeros(4), divergences=np.array([1.0, 2.0, 3.0, 9.0]), correct=True),
            Trajectory('b', (1, 2), None, 1.0, 'eos', np.zeros(2), divergences=np.array([4.0, 6.0]), correct=False),
        ]
        records = records_from_trajectories(trajectories)
        self.assertEqual([r.position for r in records], [1, 2, 3, 4, 1, 2])
        self.assertEqual(kl_profile_by_correctness(records), {'correct': 2.0, 'incorrect': 5.0})

    def test_live_rollouts(self):
        """Rollouts carry one non-negative D_t per token"""
        params, pairs = tiny_params(3), pairs_mod(5, 4)
        trajectories = divergence_rollouts(params, pairs, max_len=6, seed=1)
        for trajectory in trajectories:
            self.assertEqual(len(trajectory.divergences), trajectory.length)
            self.assertTrue(np.all(trajectory.divergences >= -1e-12))
            self.assertIn(trajectory.correct, (True, False))

    def test_analyze_files(self):
        """Analysis writes the histogram, token table and summary"""
        values = np.random.default_rng(8).exponential(size=40)
        trajectories = [
            Trajectory(f"p{i}", tuple(range(10)), None, 1.0, 'eos', np.zeros(10),
                       divergences=values[i * 10:(i + 1) * 10], correct=bool(i % 2))
            for i in range(4)
        ]
        with tempfile.TemporaryDirectory() as tmp:
            summary = analyze_trajectories(trajectories, tmp, bins=5)
            rows = read_csv(Path(tmp) / 'kl_histogram.csv')
            self.assertTrue((Path(tmp) / 'kl_tokens.csv').exists())
            self.assertIn('right skewed', (Path(tmp) / 'kl_summary.txt').read_text())
        self.assertEqual(sum(int(row['count']) for row in rows), 40)
        self.assertEqual(summary.n, 40)
        assert_array_equal(sorted(float(row['bin_edge']) for row in rows), [float(row['bin_edge']) for row in rows])

    def test_instance_answer(self):
        """Fixture pairs carry their program's answer"""
        pair = make_pair(build_instance(3, [('+', 4)], 7), NoiseSpec(p_sub=0.0, p_dup=0.0), np.random.default_rng(0), 'pair-x')
        self.assertEqual(pair.answer, 0)
