"""SGD with momentum and the step learning-rate schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      velocity: Sequence[np.ndarray], lr: float, momentum: float):
    """In-place update ``v <- momentum*v - lr*g``; ``p <- p + v``. Returns ``(params, velocity)``."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if not len(params) == len(grads) == len(velocity):
        raise ShapeError("params, grads and velocity must have the same length")
    for p, g, v in zip(params, grads, velocity):
        if not p.shape == g.shape == v.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v -= lr * g
        p += v
    return params, velocity


def step_lr(iteration: int, base_lr: float, decay: float, interval: int) -> float:
    """Learning rate at 1-based ``iteration``; multiplied by ``decay`` after every ``interval`` iterations."""
    if interval <= 0:
        raise ValueError("decay interval must be positive")
    if iteration < 1:
        raise ValueError("iterations are 1-based")
    return base_lr * decay ** ((iteration - 1) // interval)


class SGD:
    """Momentum SGD over a fixed list of parameters. Parameters without a gradient are left alone."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        ps, gs, vs = [], [], []
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            # fresh array so views handed out earlier keep the old values
            p.data = p.data.copy()
            ps.append(p.data)
            gs.append(p.grad)
            vs.append(v)
        sgd_momentum_step(ps, gs, vs, lr, self.momentum)
