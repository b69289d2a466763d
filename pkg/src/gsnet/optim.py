from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StateError
from .tensor import Tensor


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """Polynomial decay ``base_lr * (1 - step/total)^power``; 0 once step >= total."""
    if total_steps <= 0 or step >= total_steps:
        return 0.0
    return base_lr * (1.0 - max(step, 0) / total_steps) ** power


@dataclass
class SgdState:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    step_count: int = 0
    velocity: dict[int, np.ndarray] = field(default_factory=dict, repr=False)


def sgd_step(state: SgdState, params: list[Tensor]) -> None:
    """One SGD-with-momentum update with coupled weight decay, then zero the grads.

    v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
    """
    for i, p in enumerate(params):
        if p.grad is None:
            raise StateError(f"parameter {i} (shape {p.shape}) has no gradient")
    for i, p in enumerate(params):
        d = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad.copy()
        v = state.velocity.get(i)
        if v is None:
            v = d
        else:
            v = state.momentum * v + d
        state.velocity[i] = v
        p.data -= state.learning_rate * v
        p.grad.fill(0.0)
    state.step_count += 1
