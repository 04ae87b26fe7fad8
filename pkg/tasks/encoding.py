"""
Text, audio and target renderings of a SemanticInstance.

The text stream is the canonical symbol sequence
``start op_1 b_1 ... op_n b_n MOD m`` (2n + 3 tokens). The audio stream renders
every symbol as 1-3 frames of its frame class, then corrupts frames by
confusable substitution and duplication. Adjacent symbols always alternate
between numbers and operators, so collapsing runs of equal frames recovers the
symbol stream exactly when no substitution happened.
"""
import logging
from dataclasses import dataclass

import numpy as np

from cord_lab.exceptions import TaskError

from .programs import build_instance
from .vocab import (
    ANSWER,
    AUDIO_VOCAB_SIZE,
    EOS,
    FRAME_OF_SYMBOL,
    MAX_NUMBER,
    SYMBOL_OF_FRAME,
    TEXT_MOD,
    TEXT_OPERATOR_IDS,
    TEXT_OPERATORS_BY_ID,
    confusables,
    is_number_token,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSpec:
    """How an instance is corrupted on its way to the audio alphabet"""
    p_sub: float = 0.0
    p_dup: float = 0.0
    frames_min: int = 1
    frames_max: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ('p_sub', 'p_dup'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise TaskError(f"{name}={value} outside [0, 1]")
        if not 1 <= self.frames_min <= self.frames_max <= 3:
            raise TaskError(f"Frames per symbol [{self.frames_min}, {self.frames_max}] outside [1, 3]")


@dataclass(frozen=True)
class ModalPair:
    """Semantically equivalent text and audio inputs with the supervised target"""
    id: str
    instance: object
    x_text: tuple
    x_audio: tuple
    target: tuple
    split: str = 'train'

    @property
    def answer(self):
        return self.instance.answer

    @property
    def length(self):
        return self.instance.length


@dataclass(frozen=True)
class AuxInstance:
    """Audio-only item labelled with the noise class it was rendered at"""
    id: str
    x_audio: tuple
    label: str
    split: str = 'train'


def encode_text(instance):
    tokens = [instance.start]
    for operator, operand in instance.steps:
        tokens.append(TEXT_OPERATOR_IDS[operator])
        tokens.append(operand)
    tokens.extend([TEXT_MOD, instance.modulus])
    return tokens


def text_length(steps):
    """Token count of the text encoding of a program with ``steps`` steps"""
    return 2 * steps + 3


def decode_text(tokens):
    """Parse a text token stream back into its SemanticInstance"""
    tokens = [int(token) for token in tokens]
    if len(tokens) < 5 or len(tokens) % 2 == 0:
        raise TaskError(f"Text stream of length {len(tokens)} is not a program")
    if tokens[-2] != TEXT_MOD:
        raise TaskError("Text stream does not end with 'mod m'")
    start, modulus = tokens[0], tokens[-1]
    if not is_number_token(start) or not is_number_token(modulus):
        raise TaskError("Start value and modulus must be number tokens")
    steps = []
    for position in range(1, len(tokens) - 2, 2):
        operator, operand = tokens[position], tokens[position + 1]
        if operator not in TEXT_OPERATORS_BY_ID or not is_number_token(operand):
            raise TaskError(f"Malformed step at position {position}")
        steps.append((TEXT_OPERATORS_BY_ID[operator], operand))
    return build_instance(start, steps, modulus)


def _render_frames(symbols, noise, rng):
    """Frames plus the clean frame class each one was rendered from"""
    frames, sources = [], []
    for symbol in symbols:
        base = int(FRAME_OF_SYMBOL[symbol])
        repeats = int(rng.integers(noise.frames_min, noise.frames_max + 1))
        for _ in range(repeats):
            frame = base
            if rng.random() < noise.p_sub:
                frame = confusables(base)[int(rng.integers(2))]
            frames.append(frame)
            sources.append(base)
            if rng.random() < noise.p_dup:
                frames.append(frame)
                sources.append(base)
    return frames, sources


def encode_audio(instance, noise, rng=None):
    """
    Audio-alphabet rendering of an instance.

    Draws come from ``rng`` when given, otherwise from a generator seeded
    with ``noise.seed``.
    """
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    frames, _ = _render_frames(encode_text(instance), noise, rng)
    return frames


def substitution_rate(instance_stream, noise, rng):
    """Fraction of rendered frames that differ from their clean frame class"""
    changed = total = 0
    for instance in instance_stream:
        frames, sources = _render_frames(encode_text(instance), noise, rng)
        changed += sum(1 for frame, source in zip(frames, sources) if frame != source)
        total += len(frames)
    if total == 0:
        raise TaskError("No frames rendered")
    return changed / total


def audio_core(frames):
    """Collapse runs of equal frames and map each run back to its text symbol"""
    symbols = []
    previous = None
    for frame in frames:
        frame = int(frame)
        if not 0 <= frame < AUDIO_VOCAB_SIZE:
            raise TaskError(f"Frame {frame} outside the audio alphabet")
        if frame != previous:
            symbols.append(int(SYMBOL_OF_FRAME[frame]))
        previous = frame
    return symbols


def render_target(instance):
    return [*instance.trace, ANSWER, instance.answer, EOS]


def parse_target(tokens):
    """Inverse of render_target: returns (trace, answer)"""
    tokens = [int(token) for token in tokens]
    if len(tokens) < 4 or tokens[-1] != EOS or tokens[-3] != ANSWER:
        raise TaskError("Target must end with 'ANSWER a EOS'")
    body = tokens[:-3]
    answer = tokens[-2]
    if not all(0 <= token <= MAX_NUMBER for token in body + [answer]):
        raise TaskError("Trace and answer must be number tokens")
    return tuple(body), answer


def make_pair(instance, noise, rng, pair_id, split='train'):
    return ModalPair(
        id=pair_id,
        instance=instance,
        x_text=tuple(encode_text(instance)),
        x_audio=tuple(encode_audio(instance, noise, rng=rng)),
        target=tuple(render_target(instance)),
        split=split,
    )
