"""
Modular-arithmetic programs: the semantic content shared by both modalities.
"""
import logging
from dataclasses import dataclass

import numpy as np

from cord_lab.exceptions import TaskError

from .vocab import MAX_NUMBER, OPERATORS

logger = logging.getLogger(__name__)

MIN_MODULUS = 5
MIN_LENGTH = 1
MAX_LENGTH = 8


def apply_step(value, operator, operand, modulus):
    if operator == '+':
        return (value + operand) % modulus
    if operator == '-':
        return (value - operand) % modulus
    if operator == '*':
        return (value * operand) % modulus
    raise TaskError(f"Unknown operator '{operator}'")


@dataclass(frozen=True)
class SemanticInstance:
    """A start value, a list of (operator, operand) steps and a modulus"""
    start: int
    steps: tuple
    modulus: int
    trace: tuple
    answer: int

    @property
    def length(self):
        return len(self.steps)

    @property
    def program(self):
        parts = [str(self.start)]
        for operator, operand in self.steps:
            parts.append(f"{operator} {operand}")
        return f"{' '.join(parts)} mod {self.modulus}"

    def __str__(self):
        return self.program


def validate_parameters(length, modulus):
    if not MIN_MODULUS <= modulus <= MAX_NUMBER:
        raise TaskError(f"Modulus {modulus} outside [{MIN_MODULUS}, {MAX_NUMBER}]")
    if not MIN_LENGTH <= length <= MAX_LENGTH:
        raise TaskError(f"Program length {length} outside [{MIN_LENGTH}, {MAX_LENGTH}]")


def build_instance(start, steps, modulus):
    """Evaluate a program and return it with its trace and answer"""
    steps = tuple((operator, int(operand)) for operator, operand in steps)
    validate_parameters(len(steps), modulus)
    if not 0 <= start < modulus:
        raise TaskError(f"Start value {start} outside Z_{modulus}")
    value = start
    trace = []
    for operator, operand in steps:
        if operator not in OPERATORS:
            raise TaskError(f"Unknown operator '{operator}'")
        if not 0 <= operand < modulus:
            raise TaskError(f"Operand {operand} outside Z_{modulus}")
        value = apply_step(value, operator, operand, modulus)
        trace.append(value)
    return SemanticInstance(start=int(start), steps=steps, modulus=int(modulus), trace=tuple(trace), answer=value)


def generate_instance(length, modulus, seed=None, rng=None):
    """Random program of ``length`` steps over Z_modulus"""
    validate_parameters(length, modulus)
    if rng is None:
        rng = np.random.default_rng(seed)
    start = int(rng.integers(modulus))
    steps = []
    for _ in range(length):
        operator = OPERATORS[int(rng.integers(len(OPERATORS)))]
        steps.append((operator, int(rng.integers(modulus))))
    return build_instance(start, steps, modulus)
