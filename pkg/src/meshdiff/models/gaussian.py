"""Exact noise predictor for a Gaussian target with diagonal covariance."""

from __future__ import annotations

import numpy as np

from ..diffusion import NoiseSchedule, hop_sigma


class AnalyticGaussianScore:
    """Closed-form ``E[z | h_k]`` when ``h0 ~ N(mean, diag(var))``.

    Noised to step k the marginal is ``N(sqrt(a) mean, a var + 1 - a)``, so the
    optimal noise prediction is affine in ``h_k`` with a diagonal Jacobian.
    """

    def __init__(self, mean, var, sched: NoiseSchedule):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = np.broadcast_to(np.asarray(var, dtype=np.float64), self.mean.shape).copy()
        if np.any(self.var < 0):
            raise ValueError("variances must be non-negative")
        self.sched = sched

    def _marginal(self, k):
        a = self.sched.alphas[k]
        return a, a * self.var + (1.0 - a)

    def evaluate(self, hk, k, context=None):
        a, marg_var = self._marginal(k)
        return np.sqrt(1.0 - a) * (hk - np.sqrt(a) * self.mean) / marg_var

    def jacobian_diag(self, k):
        a, marg_var = self._marginal(k)
        return np.sqrt(1.0 - a) / marg_var

    def vjp(self, hk, k, context, cotangent):
        return self.jacobian_diag(k) * cotangent

    def posterior_mean(self, hk, k):
        """``E[h0 | h_k]`` by Gaussian conditioning."""
        a, marg_var = self._marginal(k)
        return self.mean + np.sqrt(a) * self.var * (hk - np.sqrt(a) * self.mean) / marg_var

    def score(self, hk, k):
        a, marg_var = self._marginal(k)
        return -(hk - np.sqrt(a) * self.mean) / marg_var

    def chain_moments(self, sched: NoiseSchedule):
        """Exact mean and variance of an unguided reverse chain started from N(0, 1).

        Every hop is affine in the state for this model, so the moments follow a
        scalar recursion per coordinate. This is the reference the sampler must hit,
        which differs from ``(mean, var)`` by the discretisation error of the chain.
        """
        m = np.zeros_like(self.mean)
        v = np.ones_like(self.mean)
        nxt = list(sched.steps[1:]) + [0]
        for k_from, k_to in zip(sched.steps, nxt):
            a, marg = self._marginal(k_from)
            sigma = hop_sigma(sched, k_from, k_to)
            a_to = sched.alphas[k_to]
            c_dir = np.sqrt(max(1.0 - a_to - sigma**2, 0.0))
            # eps = g * (h - sqrt(a) mean); h0_hat = (h - sqrt(1 - a) eps) / sqrt(a)
            g = np.sqrt(1.0 - a) / marg
            slope = c_dir * g + np.sqrt(a_to) * (1.0 - np.sqrt(1.0 - a) * g) / np.sqrt(a)
            offset = -np.sqrt(a) * self.mean * (c_dir * g - np.sqrt(a_to) * np.sqrt(1.0 - a) * g / np.sqrt(a))
            m = slope * m + offset
            v = slope**2 * v + sigma**2
        return m, v
