"""SGD with momentum and weight decay, plus the multistep learning-rate schedule."""

from dataclasses import dataclass, field

import numpy as np

from .errors import GradientError


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(params, state):
    """One update ``v <- mu*v + (g + wd*p); p <- p - lr*v``.  Clears grads."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradientError(f"sgd_step: parameter {p.name or i!r} has no gradient")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise ValueError("sgd_step: velocity list does not match parameter list")
    for p, v in zip(params, state.velocity):
        if v.shape != p.data.shape:
            raise ValueError(f"sgd_step: velocity shape {v.shape} != parameter shape {p.data.shape}")
        v *= state.momentum
        v += p.grad + state.weight_decay * p.data
        # in place so that views held by frozen copies of the model stay current
        p.data -= state.learning_rate * v
        p.grad = None
    return params


def lr_schedule(epoch, total_epochs, base_lr):
    """Divide by 10 at the halfway point and again at three quarters."""
    if epoch < total_epochs // 2:
        return base_lr
    if epoch < (3 * total_epochs) // 4:
        return base_lr / 10
    return base_lr / 100
