"""Feature maps for the linear action-value learner."""

from __future__ import annotations

import itertools

import numpy as np


class OneHotFeatures:
    """Indicator features over integer state ids (linear == tabular)."""

    def __init__(self, n_states: int):
        self.dim = n_states

    def __call__(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64).reshape(-1)
        out = np.zeros((states.size, self.dim))
        out[np.arange(states.size), states] = 1.0
        return out


class FourierFeatures:
    """Cosine basis ``cos(pi * c . x)`` over states rescaled into [0, 1]^d.

    ``order`` bounds each integer coefficient; all ``(order + 1)^d``
    combinations are used. Inputs outside ``[low, high]`` are clipped.
    """

    def __init__(self, low, high, order: int = 3):
        self.low = np.asarray(low, dtype=float)
        self.high = np.asarray(high, dtype=float)
        d = self.low.size
        self.coeffs = np.array(list(itertools.product(range(order + 1), repeat=d)), dtype=float)
        self.dim = self.coeffs.shape[0]
        norms = np.linalg.norm(self.coeffs, axis=1)
        norms[0] = 1.0
        # per-feature step scaling from Konidaris et al.'s Fourier basis
        self.lr_scale = 1.0 / norms

    def __call__(self, states) -> np.ndarray:
        x = np.atleast_2d(np.asarray(states, dtype=float))
        z = np.clip((x - self.low) / (self.high - self.low), 0.0, 1.0)
        return np.cos(np.pi * z @ self.coeffs.T)


CARTPOLE_LOW = np.array([-2.4, -3.0, -0.21, -3.5])
CARTPOLE_HIGH = -CARTPOLE_LOW


def cartpole_features(order: int = 3) -> FourierFeatures:
    return FourierFeatures(CARTPOLE_LOW, CARTPOLE_HIGH, order)
