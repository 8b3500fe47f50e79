"""Adam optimizer over flat float64 parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.1
    max_epochs: int = 80
    patience: int = 10
    min_delta: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Standard Adam with bias-corrected first and second moments."""

    def __init__(self, size: int, config: OptimizerConfig | None = None):
        self.config = config or OptimizerConfig()
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return updated parameters; does not mutate the input array."""
        c = self.config
        self.t += 1
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * grad * grad
        mhat = self.m / (1.0 - c.beta1**self.t)
        vhat = self.v / (1.0 - c.beta2**self.t)
        return params - c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)


class EarlyStopper:
    """Track the best loss; signal stop after `patience` epochs without
    improvement of at least `min_delta`."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, loss: float, epoch: int) -> bool:
        """Record this epoch's loss; return True when training should stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience
