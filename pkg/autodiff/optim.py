"""
AdamW with decoupled weight decay.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from cord_lab.exceptions import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class OptimState:
    """Moment accumulators and hyperparameters for one parameter set"""
    lr: float = 3e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def optimizer_step(params, grads, state):
    """
    Apply one AdamW update in place.

    ``params`` maps names to parameter Tensors and ``grads`` maps the same
    names to gradient arrays. Decay is applied to the weights directly,
    independently of the moment estimates. Returns (params, state).
    """
    missing = set(params) - set(grads)
    if missing:
        raise ShapeError(f"No gradient supplied for parameters: {sorted(missing)}")
    for name, tensor in params.items():
        if grads[name].shape != tensor.shape:
            raise ShapeError(f"Gradient for '{name}' has shape {grads[name].shape}, parameter has {tensor.shape}")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteError(f"Non-finite gradient for parameter '{name}'")

    state.step += 1
    beta1, beta2 = state.betas
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step

    for name, tensor in params.items():
        dtype = tensor.dtype
        grad = grads[name].astype(dtype, copy=False)
        exp_avg = state.exp_avg.get(name)
        if exp_avg is None:
            exp_avg = np.zeros_like(tensor.data)
            state.exp_avg_sq[name] = np.zeros_like(tensor.data)
        exp_avg_sq = state.exp_avg_sq[name]

        exp_avg = dtype.type(beta1) * exp_avg + dtype.type(1.0 - beta1) * grad
        exp_avg_sq = dtype.type(beta2) * exp_avg_sq + dtype.type(1.0 - beta2) * grad * grad
        state.exp_avg[name] = exp_avg
        state.exp_avg_sq[name] = exp_avg_sq

        decayed = tensor.data * dtype.type(1.0 - state.lr * state.weight_decay)
        update = (exp_avg / dtype.type(correction1)) / (np.sqrt(exp_avg_sq / dtype.type(correction2)) + dtype.type(state.eps))
        tensor.data = decayed - dtype.type(state.lr) * update

    logger.debug(f"AdamW step {state.step} applied to {len(params)} tensors")
    return params, state


def global_grad_norm(grads):
    """L2 norm over every gradient array"""
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
