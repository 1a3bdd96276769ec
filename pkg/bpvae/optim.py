from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .config import ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, DEFAULT_LEARNING_RATE
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Gradients are left untouched; the caller resets them.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {p.grad.shape} != parameter shape {p.shape} for {name!r}")

    state.step_count += 1
    bc1 = 1.0 - state.beta1**state.step_count
    bc2 = 1.0 - state.beta2**state.step_count

    for name, p in params.items():
        g = p.grad
        m = state.first_moment.setdefault(name, np.zeros_like(p.data))
        v = state.second_moment.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.data.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} != parameter shape {p.shape} for {name!r}")

        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)

        p.data -= (state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)).astype(
            p.data.dtype, copy=False
        )
