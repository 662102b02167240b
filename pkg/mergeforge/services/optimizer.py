from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from mergeforge.schemas.config import OptimizerConfig, OptimizerKind


@dataclass
class OptimizerState:
    """
    Optimizer hyperparameters plus running state.

    AdamW keeps two moments per tracked parameter; SGD keeps none.
    """
    kind: OptimizerKind = OptimizerKind.ADAMW
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Optional[List[np.ndarray]] = field(default=None, repr=False)
    second_moment: Optional[List[np.ndarray]] = field(default=None, repr=False)

    @classmethod
    def from_config(cls, config: OptimizerConfig) -> "OptimizerState":
        return cls(
            kind=OptimizerKind(config.optimizer),
            learning_rate=config.learning_rate,
            weight_decay=config.weight_decay,
            beta1=config.beta1,
            beta2=config.beta2,
            epsilon=config.epsilon,
        )


class Optimizer:
    """Applies SGD or decoupled-weight-decay Adam (AdamW) updates in place."""

    def __init__(self, state: OptimizerState):
        self.state = state

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        state = self.state
        state.step_count += 1

        if state.kind == OptimizerKind.SGD:
            for param, grad in zip(params, grads):
                param -= state.learning_rate * (grad + state.weight_decay * param)
            return

        if state.first_moment is None:
            state.first_moment = [np.zeros_like(p) for p in params]
            state.second_moment = [np.zeros_like(p) for p in params]

        t = state.step_count
        bias1 = 1.0 - state.beta1 ** t
        bias2 = 1.0 - state.beta2 ** t
        for param, grad, m, v in zip(params, grads, state.first_moment, state.second_moment):
            param -= state.learning_rate * state.weight_decay * param
            m *= state.beta1
            m += (1.0 - state.beta1) * grad
            v *= state.beta2
            v += (1.0 - state.beta2) * grad * grad
            param -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
