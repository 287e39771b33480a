from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearSchedule:
    """Piecewise-linear ramp from ``start_value`` to ``end_value``.

    Reaches ``end_value`` at ``end_fraction * total_steps`` and stays there.
    """

    start_value: float
    end_value: float
    total_steps: int
    end_fraction: float = 1.0

    def __post_init__(self) -> None:
        if not 0 < self.end_fraction <= 1:
            raise ValueError("end_fraction must be in (0, 1]")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    def value(self, step: int) -> float:
        horizon = self.end_fraction * self.total_steps
        if step >= horizon:
            return float(self.end_value)
        frac = max(step, 0) / horizon
        return float(self.start_value + frac * (self.end_value - self.start_value))


class Adam:
    """Adam with bias correction over a dict of named parameter arrays.

    Parameters are updated in place. With ``decoupled=False`` the weight decay
    enters the gradient (g <- g + wd * w); with ``decoupled=True`` it shrinks
    the weights directly by lr * wd * w after the Adam step.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 decoupled: bool = False) -> None:
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decoupled = decoupled
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            # a sum is finite iff no entry is inf/nan, barring overflow of the sum itself
            if not math.isfinite(float(g.sum())):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        step_size = lr / (1 - self.beta1 ** t)
        inv_c2 = 1.0 / math.sqrt(1 - self.beta2 ** t)
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            denom = np.sqrt(v)
            denom *= inv_c2
            denom += self.eps
            p -= step_size * (m / denom)
            if self.weight_decay and self.decoupled:
                p -= (lr * self.weight_decay) * p
