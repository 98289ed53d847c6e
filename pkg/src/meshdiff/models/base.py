"""The noise-predictor interface shared by every denoiser."""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np


@runtime_checkable
class ScoreModel(Protocol):
    """A noise predictor ``g(h_k, k, context)``.

    The score of the noised data density relates to the prediction by
    ``score = -eps / sqrt(1 - alpha_k)``.
    """

    def evaluate(self, hk: np.ndarray, k: int, context=None) -> np.ndarray: ...

    def vjp(self, hk: np.ndarray, k: int, context, cotangent: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product of ``evaluate`` with respect to ``hk``."""
        ...


def has_vjp(model) -> bool:
    return callable(getattr(model, "vjp", None))
