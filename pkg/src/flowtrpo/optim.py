"""Adaptive-moment gradient descent on flat parameter vectors."""

from __future__ import annotations

import numpy as np


class Adam:
    """Standard bias-corrected Adam; operates on one flat vector."""

    def __init__(self, size: int, step_size: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def update(self, grad: np.ndarray) -> np.ndarray:
        """Returns the increment to *add* for a descent step on ``grad``."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return -self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)
