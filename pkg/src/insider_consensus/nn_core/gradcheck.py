from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import Module


def grad_check(model: Module, loss: Callable, inputs: tuple, target=None, step: float = 1e-3,
               max_coords: int = 20, seed: int = 0) -> float:
    """Max relative error between central differences and the analytic gradient.

    ``model.forward(*inputs)`` produces a prediction and ``loss(pred, target)``
    returns ``(value, dpred)``. The model is switched to float64 and eval mode
    (dropout off) in place. Up to ``max_coords`` coordinates per parameter are
    sampled; error is |fd - an| / max(1, |fd|, |an|).
    """
    model.astype(np.float64).eval()
    inputs = tuple(np.asarray(x, dtype=np.float64) if np.asarray(x).dtype.kind == "f" else x for x in inputs)

    def value() -> float:
        return loss(model.forward(*inputs), target)[0]

    model.zero_grad()
    _, dpred = loss(model.forward(*inputs), target)
    model.backward(dpred)
    analytic = {n: g.copy() for n, g in model.gradients().items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.parameters().items():
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        g_an = analytic[name].reshape(-1)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = value()
            flat[i] = orig - step
            down = value()
            flat[i] = orig
            fd = (up - down) / (2 * step)
            err = abs(fd - g_an[i]) / max(1.0, abs(fd), abs(g_an[i]))
            worst = max(worst, err)
    return worst
