"""Collapse an ensemble of clean samples into one prediction."""

from __future__ import annotations

import numpy as np

from ..diffusion import MeshSample


class RefinementHead:
    """Optional residual MLP on the flattened ensemble centre (one hidden tanh layer)."""

    def __init__(self, W1, b1, W2, b2):
        self.W1, self.b1, self.W2, self.b2 = (np.asarray(x, dtype=np.float64) for x in (W1, b1, W2, b2))

    @classmethod
    def zeros(cls, V: int, hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        n = 3 * V
        return cls(rng.standard_normal((n, hidden)) / np.sqrt(n), np.zeros(hidden), np.zeros((hidden, n)), np.zeros(n))

    def __call__(self, center: np.ndarray) -> np.ndarray:
        x = center.reshape(-1)
        return (x + np.tanh(x @ self.W1 + self.b1) @ self.W2 + self.b2).reshape(center.shape)


def aggregate_prediction(samples, head=None) -> MeshSample:
    arrs = [np.asarray(getattr(s, "vertices", s), dtype=np.float64) for s in samples]
    if not arrs:
        raise ValueError("aggregate_prediction needs at least one sample")
    center = np.mean(np.stack(arrs), axis=0)
    if head is not None:
        center = head(center)
    return MeshSample(center, 0)
