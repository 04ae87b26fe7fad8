import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from cord_lab.exceptions import ArtifactIOError, TaskError
from cord_lab.seeding import substream

from .datasets import (
    AUX_NOISE,
    eval_buckets,
    generate_aux,
    generate_dataset,
    label_balance,
    load_aux,
    load_pairs,
    split_counts,
    unique_instances,
)
from .encoding import (
    NoiseSpec,
    audio_core,
    decode_text,
    encode_audio,
    encode_text,
    parse_target,
    render_target,
    substitution_rate,
    text_length,
)
from .programs import build_instance, generate_instance
from .vocab import ANSWER, EOS, FRAME_OF_SYMBOL, SYMBOL_OF_FRAME, TEXT_VOCAB_SIZE, confusables


class ProgramTestCase(SimpleTestCase):
    """Test cases for program evaluation"""

    def test_single_step(self):
        """3 + 4 mod 7 evaluates to 0"""
        instance = build_instance(3, [('+', 4)], 7)
        self.assertEqual(instance.answer, 0)
        self.assertEqual(instance.trace, (0,))
        self.assertEqual(str(instance), '3 + 4 mod 7')

    def test_two_steps(self):
        """2 * 3 + 4 mod 5 traces [1, 0]"""
        instance = build_instance(2, [('*', 3), ('+', 4)], 5)
        self.assertEqual(instance.trace, (1, 0))
        self.assertEqual(instance.answer, 0)

    def test_subtraction_wraps(self):
        """Negative intermediates wrap into Z_m"""
        self.assertEqual(build_instance(1, [('-', 3)], 5).answer, 3)

    def test_seeded_generation(self):
        """Same seed, same instance"""
        self.assertEqual(generate_instance(4, 11, seed=9), generate_instance(4, 11, seed=9))

    def test_trace_consistency(self):
        """Every trace entry is the partial evaluation"""
        instance = generate_instance(6, 17, seed=2)
        value = instance.start
        for (operator, operand), recorded in zip(instance.steps, instance.trace):
            value = build_instance(value, [(operator, operand)], 17).answer
            self.assertEqual(value, recorded)
        self.assertEqual(instance.answer, instance.trace[-1])

    def test_parameter_ranges(self):
        """Modulus outside [5, 31] or length outside [1, 8] is rejected"""
        for length, modulus in [(1, 4), (1, 32), (0, 7), (9, 7)]:
            with self.assertRaises(TaskError):
                generate_instance(length, modulus, seed=0)


class EncodingTestCase(SimpleTestCase):
    """Test cases for the text, audio and target renderings"""

    def setUp(self):
        self.instance = build_instance(2, [('*', 3), ('+', 4)], 5)
        self.rng = np.random.default_rng(5)

    def test_text_round_trip(self):
        """decode_text inverts encode_text"""
        for seed in range(20):
            instance = generate_instance(1 + seed % 8, 5 + seed, seed=seed)
            self.assertEqual(decode_text(encode_text(instance)), instance)

    def test_text_injective(self):
        """Distinct programs encode differently"""
        other = build_instance(2, [('*', 3), ('+', 3)], 5)
        self.assertNotEqual(encode_text(self.instance), encode_text(other))

    def test_text_length(self):
        """A length-n program takes 2n + 3 tokens"""
        for length in range(1, 9):
            instance = generate_instance(length, 13, seed=length)
            self.assertEqual(len(encode_text(instance)), text_length(length))

    def test_malformed_text(self):
        """Streams without the modulus marker are rejected"""
        with self.assertRaises(TaskError):
            decode_text([1, 32, 2, 5, 5])

    def test_frame_layout_is_bijective(self):
        """Every text symbol has its own frame class"""
        self.assertEqual(sorted(FRAME_OF_SYMBOL.tolist()), list(range(TEXT_VOCAB_SIZE)))
        for symbol in range(TEXT_VOCAB_SIZE):
            self.assertEqual(SYMBOL_OF_FRAME[FRAME_OF_SYMBOL[symbol]], symbol)

    def test_noiseless_audio(self):
        """Without noise and one frame per symbol, audio is a re-alphabeting"""
        noise = NoiseSpec(frames_min=1, frames_max=1)
        frames = encode_audio(self.instance, noise, rng=self.rng)
        self.assertEqual(frames, [int(FRAME_OF_SYMBOL[s]) for s in encode_text(self.instance)])

    def test_full_substitution(self):
        """p_sub = 1 replaces every frame by one of its confusables"""
        noise = NoiseSpec(p_sub=1.0, frames_min=1, frames_max=1)
        frames = encode_audio(self.instance, noise, rng=self.rng)
        for frame, symbol in zip(frames, encode_text(self.instance)):
            self.assertIn(frame, confusables(int(FRAME_OF_SYMBOL[symbol])))

    def test_substitution_rate(self):
        """Monte-Carlo substitution rate is within 0.01 of p_sub"""
        rng = np.random.default_rng(11)
        instances = [generate_instance(4, 13, rng=rng) for _ in range(1820)]
        noise = NoiseSpec(p_sub=0.1, frames_min=1, frames_max=1)
        rate = substitution_rate(instances, noise, np.random.default_rng(12))
        self.assertAlmostEqual(rate, 0.1, delta=0.01)

    def test_audio_core_recovers_symbols(self):
        """Run-collapse undoes frame repetition and duplication"""
        noise = NoiseSpec(p_dup=0.5, frames_min=1, frames_max=3)
        for seed in range(10):
            instance = generate_instance(1 + seed % 8, 23, seed=seed)
            frames = encode_audio(instance, noise, rng=np.random.default_rng(seed))
            self.assertGreaterEqual(len(frames), len(encode_text(instance)))
            self.assertEqual(audio_core(frames), encode_text(instance))

    def test_audio_seeded(self):
        """Audio rendering is deterministic given the noise seed"""
        noise = NoiseSpec(p_sub=0.3, p_dup=0.3, seed=4)
        self.assertEqual(encode_audio(self.instance, noise), encode_audio(self.instance, noise))

    def test_noise_validation(self):
        """Probabilities outside [0, 1] are rejected"""
        with self.assertRaises(TaskError):
            NoiseSpec(p_sub=1.5)

    def test_target_shape(self):
        """A one-step target is 't_1 ANSWER a EOS'"""
        instance = build_instance(3, [('+', 4)], 7)
        self.assertEqual(render_target(instance), [0, ANSWER, 0, EOS])

    def test_target_round_trip(self):
        """parse_target returns the trace and answer"""
        instance = generate_instance(5, 19, seed=3)
        target = render_target(instance)
        self.assertEqual(target[target.index(ANSWER) + 1], instance.answer)
        self.assertEqual(parse_target(target), (instance.trace, instance.answer))


class DatasetTestCase(SimpleTestCase):
    """Test cases for dataset files"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.noise = NoiseSpec(p_sub=0.1, p_dup=0.1)

    def test_split_counts(self):
        """n=10 at (0.8, 0.1, 0.1) gives 8/1/1"""
        self.assertEqual(split_counts(10, (0.8, 0.1, 0.1)), {'train': 8, 'val': 1, 'test': 1})

    def test_bad_ratios(self):
        """Ratios must sum to 1"""
        with self.assertRaises(TaskError):
            split_counts(10, (0.5, 0.1, 0.1))

    def test_split_files(self):
        """Each split file holds its share of records"""
        summary = generate_dataset(10, (0.8, 0.1, 0.1), self.noise, 3, self.root / 'a')
        lines = {split: path.read_text().splitlines() for split, path in summary.paths.items()}
        self.assertEqual({split: len(v) for split, v in lines.items()}, {'train': 8, 'val': 1, 'test': 1})

    def test_byte_identical(self):
        """Same seed, same bytes"""
        first = generate_dataset(40, (0.8, 0.1, 0.1), self.noise, 3, self.root / 'a')
        second = generate_dataset(40, (0.8, 0.1, 0.1), self.noise, 3, self.root / 'b')
        for split in first.paths:
            self.assertEqual(first.paths[split].read_bytes(), second.paths[split].read_bytes())

    def test_disjoint_splits(self):
        """No program string is shared between splits"""
        summary = generate_dataset(200, (0.8, 0.1, 0.1), self.noise, 5, self.root / 'a')
        seen = {}
        for split, path in summary.paths.items():
            for pair in load_pairs(path):
                program = pair.instance.program
                self.assertNotIn(program, seen, f"{program} in {seen.get(program)} and {split}")
                seen[program] = split
        self.assertEqual(len(seen), 200)

    def test_load_round_trip(self):
        """Loaded pairs keep their renderings and splits"""
        summary = generate_dataset(12, (0.5, 0.25, 0.25), self.noise, 8, self.root / 'a')
        pairs = load_pairs(summary.paths['val'])
        self.assertEqual(len(pairs), 3)
        for pair in pairs:
            self.assertEqual(pair.split, 'val')
            self.assertEqual(list(pair.x_text), encode_text(pair.instance))
            self.assertEqual(list(pair.target), render_target(pair.instance))

    def test_missing_file(self):
        """Reading a missing file names the path"""
        with self.assertRaises(ArtifactIOError) as ctx:
            load_pairs(self.root / 'nope.jsonl')
        self.assertIn('nope.jsonl', str(ctx.exception))

    def test_aux_balanced(self):
        """Labels are balanced within 10%"""
        summary = generate_aux(300, 2, self.root / 'aux')
        items = [item for path in summary.paths.values() for item in load_aux(path)]
        counts = label_balance(items)
        self.assertEqual(set(counts), {'low', 'mid', 'high'})
        for count in counts.values():
            self.assertLessEqual(abs(count - 100), 10)

    def test_aux_label_matches_noise(self):
        """Each record is rendered at its label's noise level"""
        summary = generate_aux(30, 6, self.root / 'aux')
        instances = unique_instances(30, 6, stream='aux-programs')
        items = [item for path in summary.paths.values() for item in load_aux(path)]
        for index, item in enumerate(items):
            p_sub, p_dup = AUX_NOISE[item.label]
            expected = encode_audio(
                instances[index], NoiseSpec(p_sub=p_sub, p_dup=p_dup), rng=substream(6, 'data', 'aux-audio', index)
            )
            self.assertEqual(list(item.x_audio), expected)

    def test_aux_deterministic(self):
        """Same seed, same auxiliary files"""
        first = generate_aux(30, 1, self.root / 'a')
        second = generate_aux(30, 1, self.root / 'b')
        for split in first.paths:
            self.assertEqual(first.paths[split].read_bytes(), second.paths[split].read_bytes())

    def test_eval_buckets(self):
        """Programs of up to two steps are short"""
        summary = generate_dataset(60, (0.0, 0.0, 1.0), self.noise, 4, self.root / 'a')
        buckets = eval_buckets(load_pairs(summary.paths['test']))
        self.assertTrue(all(pair.length <= 2 for pair in buckets['short']))
        self.assertTrue(all(pair.length >= 3 for pair in buckets['long']))
        self.assertEqual(len(buckets['short']) + len(buckets['long']), 60)
