"""
Statistics over per-step divergences of on-policy rollouts.

Records come from live rollouts (``divergence_rollouts``) or from a
trajectory dump. Percentiles use the nearest-rank definition: the q-th
percentile of n sorted values is the value at rank ceil(q/100 * n).
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from alignment.seq_align import extract_answer
from alignment.token_align import reverse_kl
from cord_lab.artifacts import write_csv, write_text
from cord_lab.exceptions import AnalysisError
from cord_lab.seeding import derive_seed
from rollouts.engine import map_ordered, sample_rollout
from tasks.vocab import describe_output

logger = logging.getLogger(__name__)

EARLY_POSITIONS = 3


@dataclass(frozen=True)
class KlRecord:
    prompt_id: str
    position: int
    length: int
    divergence: float
    token: int
    correct: bool = None

    def __post_init__(self):
        if not 1 <= self.position <= self.length:
            raise AnalysisError(f"Position {self.position} outside [1, {self.length}] for {self.prompt_id}")


def divergence_rollouts(params, pairs, temperature=1.0, max_len=200, seed=0, threads=None):
    """Audio-conditioned rollouts with D_t and answer correctness filled in"""
    pairs = list(pairs)

    def rollout(pair):
        trajectory = sample_rollout(
            params, pair, temperature=temperature, max_len=max_len,
            seed=derive_seed(seed, 'analysis', pair.id),
        )
        trajectory.divergences = reverse_kl(trajectory.audio_logprobs, trajectory.text_logprobs)
        trajectory.correct = extract_answer(trajectory.tokens) == pair.answer
        return trajectory

    return map_ordered(rollout, pairs, threads=threads)


def records_from_trajectories(trajectories):
    records = []
    for trajectory in trajectories:
        divergences = trajectory.divergences
        if divergences is None:
            continue
        length = len(divergences)
        for index, (divergence, token) in enumerate(zip(divergences, trajectory.tokens)):
            records.append(KlRecord(
                prompt_id=trajectory.prompt_id,
                position=index + 1,
                length=length,
                divergence=float(divergence),
                token=int(token),
                correct=trajectory.correct,
            ))
    return records


def _values(records):
    return np.array([record.divergence for record in records], dtype=np.float64)


def percentile(values, q):
    """Nearest-rank percentile of ``values``"""
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise AnalysisError("Percentile of an empty sample")
    if not 0 <= q <= 100:
        raise AnalysisError(f"Percentile must lie in [0, 100], got {q}")
    rank = math.ceil(Decimal(str(q)) * values.size / 100)
    rank = min(max(rank, 1), values.size)
    return float(values[rank - 1])


@dataclass
class KlHistogram:
    edges: np.ndarray
    counts: np.ndarray
    q: float
    threshold: float

    @property
    def total(self):
        return int(np.sum(self.counts))


def kl_histogram(records, bins=20, q=80):
    """
    Bin counts over D_t plus the q-th percentile threshold.

    Edges are geometric between the smallest positive and the largest value,
    with a leading [0, smallest) bin, so they plot directly on a log axis.
    """
    values = np.maximum(_values(records), 0.0)
    if values.size == 0:
        raise AnalysisError("Histogram of an empty record set")
    if bins < 1:
        raise AnalysisError(f"Need at least one bin, got {bins}")
    high = float(values.max())
    positive = values[values > 0]
    if positive.size == 0:
        edges = np.array([0.0, 1.0])
    elif positive.min() == high:
        edges = np.array([0.0, high])
    else:
        edges = np.concatenate([[0.0], np.geomspace(positive.min(), high, bins)])
        edges[-1] = high
    counts, _ = np.histogram(values, bins=edges)
    return KlHistogram(edges=edges, counts=counts, q=q, threshold=percentile(values, q))


def position_correlation(records):
    """Pearson r between decoding position and D_t"""
    if len(records) < 2:
        raise AnalysisError(f"Correlation needs at least 2 records, got {len(records)}")
    positions = np.array([record.position for record in records], dtype=np.float64)
    values = _values(records)
    if np.ptp(positions) == 0 or np.ptp(values) == 0:
        raise AnalysisError("Correlation undefined: zero variance in position or divergence")
    r = float(np.corrcoef(positions, values)[0, 1])
    return min(1.0, max(-1.0, r))


@dataclass
class TokenFrequency:
    q: float
    threshold: float
    high: list = field(default_factory=list)
    low: list = field(default_factory=list)


def _ranked(counter):
    return sorted(counter.items(), key=lambda item: (-item[1], item[0]))


def token_frequency_by_kl(records, q=80):
    """Token counts above (high region) and at or below (low region) the q-th percentile"""
    if not records:
        raise AnalysisError("Token frequencies of an empty record set")
    threshold = percentile(_values(records), q)
    high, low = Counter(), Counter()
    for record in records:
        (high if record.divergence > threshold else low)[record.token] += 1
    return TokenFrequency(q=q, threshold=threshold, high=_ranked(high), low=_ranked(low))


@dataclass(frozen=True)
class DivergenceSummary:
    n: int
    mean: float
    median: float
    p80: float
    correlation: float = None

    @property
    def right_skewed(self):
        return self.mean > self.median


def divergence_summary(records):
    values = _values(records)
    if values.size == 0:
        raise AnalysisError("Summary of an empty record set")
    try:
        correlation = position_correlation(records)
    except AnalysisError as e:
        logger.warning(f"Position correlation skipped: {e}")
        correlation = None
    return DivergenceSummary(
        n=int(values.size),
        mean=float(np.mean(values)),
        median=float(np.median(values)),
        p80=percentile(values, 80),
        correlation=correlation,
    )


def kl_profile_by_correctness(records, early=EARLY_POSITIONS):
    """Mean early-position D_t for rollouts that ended correct vs incorrect"""
    groups = {'correct': [], 'incorrect': []}
    for record in records:
        if record.correct is None or record.position > early:
            continue
        groups['correct' if record.correct else 'incorrect'].append(record.divergence)
    return {name: (float(np.mean(values)) if values else None) for name, values in groups.items()}


def write_histogram(path, histogram):
    rows = ({'bin_edge': repr(float(edge)), 'count': int(count)}
            for edge, count in zip(histogram.edges[:-1], histogram.counts))
    return write_csv(path, ['bin_edge', 'count'], rows)


def write_token_table(path, frequency, limit=20):
    rows = []
    for region, ranked in (('high', frequency.high), ('low', frequency.low)):
        for rank, (token, count) in enumerate(ranked[:limit], start=1):
            rows.append({'region': region, 'rank': rank, 'token': token,
                         'symbol': describe_output([token]), 'count': count})
    return write_csv(path, ['region', 'rank', 'token', 'symbol', 'count'], rows)


def summary_text(summary, histogram, profile):
    correlation = '-' if summary.correlation is None else f"{summary.correlation:.4f}"
    lines = [
        f"records        {summary.n}",
        f"mean D_t       {summary.mean:.6f}",
        f"median D_t     {summary.median:.6f}",
        f"p{histogram.q:g} D_t        {histogram.threshold:.6f}",
        f"right skewed   {'yes' if summary.right_skewed else 'no'}",
        f"position r     {correlation}",
    ]
    for name, value in profile.items():
        lines.append(f"early D_t ({name})  {'-' if value is None else f'{value:.6f}'}")
    return '\n'.join(lines) + '\n'


def analyze_trajectories(trajectories, out_dir, bins=20, q=80):
    """Write histogram, token tables and a text summary for a set of rollouts"""
    records = records_from_trajectories(trajectories)
    if not records:
        raise AnalysisError("No per-step divergences to analyze")
    histogram = kl_histogram(records, bins=bins, q=q)
    summary = divergence_summary(records)
    profile = kl_profile_by_correctness(records)
    write_histogram(f"{out_dir}/kl_histogram.csv", histogram)
    write_token_table(f"{out_dir}/kl_tokens.csv", token_frequency_by_kl(records, q=q))
    write_text(f"{out_dir}/kl_summary.txt", summary_text(summary, histogram, profile))
    logger.info(
        f"Analyzed {summary.n} steps: mean {summary.mean:.4f}, median {summary.median:.4f}, "
        f"p{q:g} {histogram.threshold:.4f}"
    )
    if not summary.right_skewed:
        logger.warning("Divergence distribution is not right-skewed (mean <= median)")
    return summary
