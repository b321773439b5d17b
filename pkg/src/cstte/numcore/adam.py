"""Adam optimizer over a named parameter dict."""

from __future__ import annotations

import numpy as np

from cstte.errors import NumericError
from cstte.numcore.tape import DiffArray


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(
        self,
        params: dict[str, DiffArray],
        learning_rate: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.first_moment = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.second_moment = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: dict[str, DiffArray], state: AdamState) -> None:
    """One in-place update; gradients are consumed (zeroed) afterwards."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        if not np.isfinite(p.data).all():
            raise NumericError(f"non-finite value for parameter {name!r} after update")
        p.grad.fill(0.0)
