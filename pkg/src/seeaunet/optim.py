"""Adam optimiser over a :class:`~seeaunet.params.ParameterStore`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .params import ParameterStore


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        problems = []
        if self.lr < 0:
            problems.append(f"lr must be >= 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 < b < 1:
                problems.append(f"{name} must lie in (0, 1), got {b}")
        if self.epsilon <= 0:
            problems.append(f"epsilon must be > 0, got {self.epsilon}")
        if problems:
            raise ConfigError(problems)


def adam_step(params: ParameterStore, state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update in place using each parameter's ``.grad``.

    Non-trainable entries are never touched. A trainable parameter without a
    gradient is treated as having a zero gradient.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params.trainable():
        data = p.tensor.data
        g = p.tensor.grad
        if g is None:
            g = np.zeros_like(data)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(data)
            state.v[p.name] = np.zeros_like(data)
        v = state.v[p.name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        data -= update.astype(data.dtype, copy=False)
    return state
