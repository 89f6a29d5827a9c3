"""Adam with bias correction and elementwise gradient clipping."""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from autodiff import Tensor
from errors import TrainingError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], learning_rate: float = 0.001) -> "AdamState":
        if learning_rate <= 0:
            raise ValidationError(f"learning rate must be positive, got {learning_rate}")
        return cls(
            learning_rate=learning_rate,
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One Adam update of ``params`` in place from their populated ``grad``."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise TrainingError(f"parameter {i} with shape {p.shape} has no gradient")
    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)


def clip_gradients(params: Sequence[Tensor], lo: float = -1.0, hi: float = 1.0) -> List[np.ndarray]:
    """Clamp every gradient component to [lo, hi] in place."""
    grads = []
    for p in params:
        if p.grad is not None:
            np.clip(p.grad, lo, hi, out=p.grad)
            grads.append(p.grad)
    return grads


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.001):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValidationError("a parameter is registered twice")
        self.state = AdamState.for_params(self.params, learning_rate=lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)
