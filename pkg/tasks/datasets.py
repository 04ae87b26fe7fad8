"""
Dataset generation and loading.

Main records, one JSON object per line::

    {"id": ..., "program": ..., "answer": ..., "x_text": [...], "x_audio": [...], "target": [...], "split": ...}

Auxiliary records carry ``{"id", "x_audio", "label", "split"}``. Every split
goes to its own file (``train.jsonl``, ``aux_train.jsonl`` ...).
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cord_lab.exceptions import ArtifactIOError, TaskError
from cord_lab.seeding import substream

from .encoding import AuxInstance, ModalPair, NoiseSpec, decode_text, encode_audio, make_pair
from .programs import MIN_MODULUS, generate_instance
from .vocab import AUX_LABELS, MAX_NUMBER

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')

# Noise (p_sub, p_dup) each auxiliary label is rendered at
AUX_NOISE = {
    'low': (0.0, 0.05),
    'mid': (0.1, 0.3),
    'high': (0.25, 0.6),
}

SHORT_MAX_STEPS = 2


@dataclass
class DatasetSummary:
    out_dir: Path
    counts: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @property
    def total(self):
        return sum(self.counts.values())


def split_counts(n, ratios):
    """Record count per split; rounding remainder goes to the last split"""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(SPLITS):
        raise TaskError(f"Expected {len(SPLITS)} split ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise TaskError(f"Split ratios {ratios} must be non-negative and sum to 1")
    if n < 1:
        raise TaskError(f"Dataset size must be positive, got {n}")
    first = int(round(n * ratios[0]))
    second = min(int(round(n * ratios[1])), n - first)
    return dict(zip(SPLITS, (first, second, n - first - second)))


def _check_ranges(max_length, modulus_range):
    low, high = modulus_range
    if not MIN_MODULUS <= low <= high <= MAX_NUMBER:
        raise TaskError(f"Modulus range {modulus_range} outside [{MIN_MODULUS}, {MAX_NUMBER}]")
    if max_length < 1:
        raise TaskError(f"max_length must be at least 1, got {max_length}")


def unique_instances(n, seed, max_length=4, modulus_range=(5, 13), stream='programs'):
    """``n`` instances with pairwise distinct programs"""
    _check_ranges(max_length, modulus_range)
    rng = substream(seed, 'data', stream)
    seen = set()
    instances = []
    attempts = 0
    while len(instances) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise TaskError(f"Could only draw {len(instances)} distinct programs out of {n}")
        length = int(rng.integers(1, max_length + 1))
        modulus = int(rng.integers(modulus_range[0], modulus_range[1] + 1))
        instance = generate_instance(length, modulus, rng=rng)
        if instance.program in seen:
            continue
        seen.add(instance.program)
        instances.append(instance)
    return instances


def pair_record(pair):
    return {
        'id': pair.id,
        'program': pair.instance.program,
        'answer': pair.answer,
        'x_text': list(pair.x_text),
        'x_audio': list(pair.x_audio),
        'target': list(pair.target),
        'split': pair.split,
    }


def aux_record(item):
    return {'id': item.id, 'x_audio': list(item.x_audio), 'label': item.label, 'split': item.split}


def write_jsonl(path, records):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            for record in records:
                handle.write(json.dumps(record, separators=(',', ':')))
                handle.write('\n')
    except OSError as e:
        raise ArtifactIOError(path, f"cannot write ({e.strerror or e})") from e
    return path


def read_jsonl(path):
    path = Path(path)
    try:
        with open(path, encoding='utf-8') as handle:
            lines = handle.read().splitlines()
    except OSError as e:
        raise ArtifactIOError(path, f"cannot read ({e.strerror or e})") from e
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ArtifactIOError(path, f"line {number} is not valid JSON ({e.msg})") from e
    return records


def generate_dataset(n, ratios, noise, seed, out_dir, max_length=4, modulus_range=(5, 13)):
    """
    Write ``n`` paired records split into train/val/test files.

    Programs are drawn without repetition, so no program appears in two
    splits. Audio renderings use one derived stream per record.
    """
    counts = split_counts(n, ratios)
    instances = unique_instances(n, seed, max_length=max_length, modulus_range=modulus_range)
    out_dir = Path(out_dir)
    summary = DatasetSummary(out_dir=out_dir, counts=counts)

    cursor = 0
    for split in SPLITS:
        pairs = []
        for _ in range(counts[split]):
            rng = substream(seed, 'data', 'audio', noise.seed, cursor)
            pairs.append(make_pair(instances[cursor], noise, rng, f"pair-{cursor:06d}", split=split))
            cursor += 1
        summary.paths[split] = write_jsonl(out_dir / f"{split}.jsonl", (pair_record(p) for p in pairs))

    logger.info(f"Wrote {n} paired records to {out_dir} ({counts})")
    return summary


def generate_aux(n, seed, out_dir, ratios=(0.8, 0.1, 0.1), max_length=4, modulus_range=(5, 13)):
    """Audio-only records labelled by the noise class used to render them"""
    counts = split_counts(n, ratios)
    instances = unique_instances(n, seed, max_length=max_length, modulus_range=modulus_range, stream='aux-programs')
    labels = [AUX_LABELS[i % len(AUX_LABELS)] for i in range(n)]
    order = substream(seed, 'data', 'aux-labels').permutation(n)
    labels = [labels[i] for i in order]

    out_dir = Path(out_dir)
    summary = DatasetSummary(out_dir=out_dir, counts=counts)
    cursor = 0
    for split in SPLITS:
        items = []
        for _ in range(counts[split]):
            p_sub, p_dup = AUX_NOISE[labels[cursor]]
            noise = NoiseSpec(p_sub=p_sub, p_dup=p_dup)
            rng = substream(seed, 'data', 'aux-audio', cursor)
            frames = encode_audio(instances[cursor], noise, rng=rng)
            items.append(AuxInstance(id=f"aux-{cursor:06d}", x_audio=tuple(frames), label=labels[cursor], split=split))
            cursor += 1
        summary.paths[split] = write_jsonl(out_dir / f"aux_{split}.jsonl", (aux_record(i) for i in items))

    logger.info(f"Wrote {n} auxiliary records to {out_dir} ({counts})")
    return summary


def load_pairs(path):
    """Read a split file back into ModalPairs, re-deriving each instance"""
    pairs = []
    for record in read_jsonl(path):
        try:
            instance = decode_text(record['x_text'])
            if instance.answer != record['answer']:
                raise TaskError(f"stored answer {record['answer']} disagrees with program")
            pairs.append(ModalPair(
                id=record['id'],
                instance=instance,
                x_text=tuple(record['x_text']),
                x_audio=tuple(record['x_audio']),
                target=tuple(record['target']),
                split=record.get('split', 'train'),
            ))
        except (KeyError, TypeError, TaskError) as e:
            raise ArtifactIOError(path, f"bad record {record.get('id', '?')}: {e}") from e
    return pairs


def load_aux(path):
    items = []
    for record in read_jsonl(path):
        try:
            label = record['label']
            if label not in AUX_LABELS:
                raise TaskError(f"unknown label '{label}'")
            items.append(AuxInstance(
                id=record['id'],
                x_audio=tuple(record['x_audio']),
                label=label,
                split=record.get('split', 'train'),
            ))
        except (KeyError, TypeError, TaskError) as e:
            raise ArtifactIOError(path, f"bad record {record.get('id', '?')}: {e}") from e
    return items


def dataset_paths(data_dir):
    data_dir = Path(data_dir)
    return {
        'pairs': {split: data_dir / f"{split}.jsonl" for split in SPLITS},
        'aux': {split: data_dir / f"aux_{split}.jsonl" for split in SPLITS},
    }


def eval_buckets(pairs):
    """Split eval pairs into 'short' (<= 2 steps) and 'long' programs"""
    buckets = {'short': [], 'long': []}
    for pair in pairs:
        buckets['short' if pair.length <= SHORT_MAX_STEPS else 'long'].append(pair)
    return buckets


def label_balance(items):
    """Count of each auxiliary label"""
    labels, counts = np.unique([item.label for item in items], return_counts=True)
    return {str(label): int(count) for label, count in zip(labels, counts)}
