"""
Central finite-difference gradient oracle.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from cord_lab.exceptions import NonDeterministicLossError, ShapeError

from .tensor import backward

logger = logging.getLogger(__name__)


@dataclass
class ParameterCheck:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    indices: np.ndarray
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    eps: float
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(check.passed for check in self.checks)

    @property
    def max_rel_error(self):
        return max((check.max_rel_error for check in self.checks), default=0.0)

    def summary_lines(self):
        lines = []
        for check in self.checks:
            status = 'ok' if check.passed else 'FAIL'
            lines.append(f"{check.name:<28} max_rel_err={check.max_rel_error:.3e} [{status}]")
        return lines


def relative_error(analytic, numeric, floor=1e-3):
    """|a - n| / max(|a|, |n|, floor), elementwise"""
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denominator


def grad_check(loss_builder, params, eps=1e-4, tolerance=1e-5, max_entries=None, seed=0, floor=1e-3,
               reference=None):
    """
    Compare analytic gradients of ``loss_builder()`` against central differences.

    ``params`` maps names to the leaf Tensors the builder reads. With
    ``max_entries`` set, that many entries per parameter are sampled
    (deterministically from ``seed``) instead of checking every entry.

    ``reference`` is an optional ``(builder, params)`` pair holding the same
    loss over a higher-precision copy of the parameters under the same names.
    Central differences are then taken on the copy.
    """
    numeric_builder, numeric_params = reference if reference is not None else (loss_builder, params)
    if list(numeric_params) != list(params):
        raise ShapeError("Reference parameters must carry the same names as the checked ones")
    first = loss_builder()
    if first.data.size != 1:
        raise ShapeError(f"Loss builder must return a scalar, got shape {first.shape}")
    once, twice = numeric_builder().item(), numeric_builder().item()
    if once != twice:
        raise NonDeterministicLossError(
            f"Loss builder returned {once!r} then {twice!r} at the same point"
        )

    for tensor in params.values():
        tensor.zero_grad()
    contributed = backward(first)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance, eps=eps)

    for name, tensor in params.items():
        analytic_full = contributed.get(tensor)
        if analytic_full is None:
            analytic_full = np.zeros_like(tensor.data)
        perturbed = numeric_params[name]
        perturbed.data = np.ascontiguousarray(perturbed.data)
        flat = perturbed.data.reshape(-1)
        if max_entries is not None and max_entries < flat.size:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        else:
            indices = np.arange(flat.size)

        numeric = np.empty(indices.size, dtype=np.float64)
        for slot, index in enumerate(indices):
            original = flat[index]
            flat[index] = original + eps
            plus = numeric_builder().item()
            flat[index] = original - eps
            minus = numeric_builder().item()
            flat[index] = original
            numeric[slot] = (plus - minus) / (2.0 * eps)

        analytic = analytic_full.reshape(-1)[indices].astype(np.float64)
        errors = relative_error(analytic, numeric, floor=floor)
        worst = float(errors.max()) if errors.size else 0.0
        report.checks.append(ParameterCheck(
            name=name,
            analytic=analytic,
            numeric=numeric,
            indices=indices,
            max_rel_error=worst,
            passed=worst <= tolerance,
        ))
        logger.debug(f"grad_check {name}: {indices.size} entries, max rel error {worst:.3e}")

    for tensor in params.values():
        tensor.zero_grad()
    return report
