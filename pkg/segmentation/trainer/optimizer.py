## segmentation/trainer/optimizer.py

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping

import numpy as np

from segmentation.autodiff import named_tensors
from segmentation.exceptions import ConfigError, PreconditionError, ShapeError

logger = logging.getLogger(__name__)

FULL_LEARNING_RATE = 1e-8
# The loss is summed over every pixel, so the step size shrinks with image area.
DESK_LEARNING_RATE = 1e-6


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = DESK_LEARNING_RATE
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iterations: int = 500
    seed: int = 0
    decay_biases: bool = True
    aux_loss: bool = False

    def __post_init__(self):
        issues = []
        if not self.learning_rate > 0:
            issues.append(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            issues.append(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            issues.append(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.iterations < 0:
            issues.append(f"iterations must be nonnegative, got {self.iterations}")
        if issues:
            logger.error(f"SgdConfig validation failed: {issues}")
            raise ConfigError(issues)

    @classmethod
    def full(cls, **kwargs) -> "SgdConfig":
        return cls(learning_rate=FULL_LEARNING_RATE, **kwargs)

    @classmethod
    def desk(cls, **kwargs) -> "SgdConfig":
        return cls(learning_rate=DESK_LEARNING_RATE, **kwargs)


@dataclass
class TrainState:
    """Parameters, momentum buffers and the loss recorded at each iteration."""

    params: object
    velocity: Dict[str, np.ndarray]
    loss_history: List[float] = field(default_factory=list)

    @classmethod
    def start(cls, params) -> "TrainState":
        velocity = {name: np.zeros_like(t.data) for name, t in named_tensors(params).items()}
        return cls(params, velocity)

    @property
    def iteration(self) -> int:
        return len(self.loss_history)


def sgd_step(state: TrainState, grads: Mapping[str, np.ndarray], config: SgdConfig) -> TrainState:
    """One momentum step, in place.

    g = grad + weight_decay * theta; v = momentum * v - lr * g; theta = theta + v.
    Bias tensors (names ending in ``.bias``) skip decay when
    ``config.decay_biases`` is off.
    """
    tensors = named_tensors(state.params)
    missing = [name for name in tensors if name not in grads]
    if missing:
        raise PreconditionError(f"No gradient for {missing}")

    for name, tensor in tensors.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != tensor.shape:
            raise ShapeError("gradient shape", tensor.shape, grad.shape, name)

        decay = config.weight_decay
        if name.endswith(".bias") and not config.decay_biases:
            decay = 0.0
        g = grad + decay * tensor.data if decay else grad

        v = state.velocity[name]
        v *= config.momentum
        v -= config.learning_rate * g
        tensor.data += v

    return state
