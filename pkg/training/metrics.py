"""
Per-step training metrics and their CSV logs.

Loss columns are written with ``repr`` so a rerun under the same seed gives a
byte-identical file. Wall time is kept out of metrics.csv and goes to
timings.csv instead.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

from cord_lab.exceptions import ArtifactIOError

logger = logging.getLogger(__name__)

METRIC_FIELDS = [
    'step', 'method', 'l_tok', 'l_seq', 'l_base', 'total',
    'mean_kl', 'mean_reward', 'zero_adv_fraction', 'grad_norm',
]
TIMING_FIELDS = ['step', 'wall_time']
PRETRAIN_FIELDS = ['step', 'l_text', 'l_audio', 'l_aux', 'total', 'grad_norm']


def _number(value):
    return '' if value is None else repr(float(value))


@dataclass
class StepMetrics:
    step: int
    method: str
    l_tok: float = 0.0
    l_seq: float = 0.0
    l_base: float = 0.0
    total: float = 0.0
    mean_kl: float = None
    mean_reward: float = None
    zero_adv_fraction: float = None
    grad_norm: float = 0.0
    wall_time: float = 0.0

    def row(self):
        return {
            'step': self.step,
            'method': self.method,
            'l_tok': _number(self.l_tok),
            'l_seq': _number(self.l_seq),
            'l_base': _number(self.l_base),
            'total': _number(self.total),
            'mean_kl': _number(self.mean_kl),
            'mean_reward': _number(self.mean_reward),
            'zero_adv_fraction': _number(self.zero_adv_fraction),
            'grad_norm': _number(self.grad_norm),
        }


@dataclass
class PretrainMetrics:
    step: int
    l_text: float
    l_audio: float
    l_aux: float
    total: float
    grad_norm: float

    def row(self):
        return {
            'step': self.step,
            'l_text': _number(self.l_text),
            'l_audio': _number(self.l_audio),
            'l_aux': _number(self.l_aux),
            'total': _number(self.total),
            'grad_norm': _number(self.grad_norm),
        }


class CsvLog:
    """Append-only CSV with a fixed header, flushed after every row"""

    def __init__(self, path, fieldnames):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(self.path, 'w', encoding='utf-8', newline='')
        except OSError as e:
            raise ArtifactIOError(self.path, f"cannot open log ({e.strerror or e})") from e
        self._writer = csv.DictWriter(self._handle, fieldnames=fieldnames, lineterminator='\n')
        self._writer.writeheader()
        self.rows = 0

    def append(self, row):
        self._writer.writerow(row)
        self._handle.flush()
        self.rows += 1

    def close(self):
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
