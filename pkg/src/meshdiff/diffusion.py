"""Noise schedules, forward noising and unguided reverse steps.

``alphas[k]`` is the *cumulative* signal-retention coefficient: a clean sample
``h0`` noised to step ``k`` is ``sqrt(alphas[k]) * h0 + sqrt(1 - alphas[k]) * z``.
It is not the per-step DDPM alpha.

All array arguments may carry leading batch axes in front of the ``(V, 3)``
vertex block; every operation is elementwise in those axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MeshSample",
    "NoiseSchedule",
    "ScheduleError",
    "build_schedule",
    "draw_noise",
    "estimate_h0",
    "forward_sample",
    "hop_sigma",
    "load_schedule",
    "reverse_step",
    "sample_chain",
    "save_schedule",
]


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters or hops a schedule cannot take."""


@dataclass(frozen=True)
class MeshSample:
    """A mesh state ``h_k``: vertex coordinates tagged with their diffusion step."""

    vertices: np.ndarray
    step: int

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim < 2 or v.shape[-1] != 3:
            raise ValueError(f"vertices must have shape (..., V, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vertices must be finite")
        if self.step < 0:
            raise ValueError(f"step must be >= 0, got {self.step}")
        object.__setattr__(self, "vertices", v)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[-2]


@dataclass(frozen=True)
class NoiseSchedule:
    alphas: np.ndarray  # length K+1, alphas[0] == 1
    sigmas: np.ndarray  # length K, sigmas[k-1] is the noise scale of step k
    steps: tuple[int, ...]  # visited steps at inference, strictly decreasing from K
    alpha_first: float = 0.9999
    alpha_last: float = 1e-4
    eta: float = 0.0
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def K(self) -> int:
        return len(self.alphas) - 1

    def alpha(self, k: int) -> float:
        if not 0 <= k <= self.K:
            raise ScheduleError(f"step {k} outside [0, {self.K}]")
        return float(self.alphas[k])

    def sigma(self, k: int) -> float:
        if not 1 <= k <= self.K:
            raise ScheduleError(f"step {k} outside [1, {self.K}]")
        return float(self.sigmas[k - 1])

    def hops(self) -> list[tuple[int, int]]:
        """(k_from, k_to) pairs visited by an accelerated reverse chain."""
        nxt = list(self.steps[1:]) + [0]
        return list(zip(self.steps, nxt))


def _ddpm_sigma(alpha_prev: float, alpha: float) -> float:
    return float(np.sqrt((1.0 - alpha_prev) / (1.0 - alpha)) * np.sqrt(1.0 - alpha / alpha_prev))


def build_schedule(
    K: int,
    alpha_first: float = 0.9999,
    alpha_last: float = 1e-4,
    eta: float = 0.0,
    ddim_steps: int | None = None,
) -> NoiseSchedule:
    """Linear schedule in the cumulative alphas with an evenly spaced step subsequence.

    ``eta`` interpolates the per-step noise between deterministic DDIM (0) and
    the DDPM ancestral variance (1).
    """
    if K < 1:
        raise ScheduleError(f"K must be >= 1, got {K}")
    if not 0.0 < alpha_last < alpha_first <= 1.0:
        raise ScheduleError(
            f"need 0 < alpha_last < alpha_first <= 1, got alpha_first={alpha_first}, "
            f"alpha_last={alpha_last}"
        )
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must lie in [0, 1], got {eta}")
    if ddim_steps is None:
        ddim_steps = K
    if not 1 <= ddim_steps <= K:
        raise ScheduleError(f"ddim_steps must lie in [1, K={K}], got {ddim_steps}")
    if K == 1 and alpha_first != alpha_last:
        # a single step can only carry one coefficient
        alphas = np.array([1.0, alpha_last])
    else:
        alphas = np.concatenate([[1.0], np.linspace(alpha_first, alpha_last, K)])
    sigmas = np.array([eta * _ddpm_sigma(alphas[k - 1], alphas[k]) for k in range(1, K + 1)])

    # uniform in step index; the last entry is the hop size so the final hop lands on 0
    steps = np.round(np.linspace(K, K / ddim_steps, ddim_steps)).astype(int)
    steps = tuple(int(s) for s in steps)
    if len(set(steps)) != len(steps):
        raise ScheduleError("ddim_steps produced repeated step indices")
    return NoiseSchedule(alphas, sigmas, steps, alpha_first, alpha_last, eta)


def save_schedule(sched: NoiseSchedule, path) -> None:
    lines = [
        f"K={sched.K}",
        f"alpha_first={sched.alpha_first!r}",
        f"alpha_last={sched.alpha_last!r}",
        f"eta={sched.eta!r}",
        f"ddim_steps={len(sched.steps)}",
        "steps=" + ",".join(str(s) for s in sched.steps),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_schedule(path) -> NoiseSchedule:
    kv = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    sched = build_schedule(
        int(kv["K"]),
        float(kv["alpha_first"]),
        float(kv["alpha_last"]),
        float(kv["eta"]),
        int(kv["ddim_steps"]),
    )
    stored = tuple(int(s) for s in kv["steps"].split(","))
    if stored != sched.steps:
        raise ScheduleError(f"stored steps {stored} disagree with rebuilt steps {sched.steps}")
    return sched


def draw_noise(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def forward_sample(h0: MeshSample, k: int, sched: NoiseSchedule, z: np.ndarray) -> MeshSample:
    if h0.step != 0:
        raise ValueError(f"forward_sample expects a clean sample (step 0), got step {h0.step}")
    if not 1 <= k <= sched.K:
        raise ScheduleError(f"step {k} outside [1, {sched.K}]")
    a = sched.alphas[k]
    return MeshSample(np.sqrt(a) * h0.vertices + np.sqrt(1.0 - a) * z, k)


def estimate_h0(hk: MeshSample, eps_pred: np.ndarray, k: int, sched: NoiseSchedule) -> MeshSample:
    """One-jump estimate of the clean sample from ``hk`` and a noise prediction."""
    if not 1 <= k <= sched.K:
        raise ScheduleError(f"step {k} outside [1, {sched.K}]")
    eps_pred = np.asarray(eps_pred)
    if eps_pred.shape != hk.vertices.shape:
        raise ValueError(f"eps_pred shape {eps_pred.shape} != sample shape {hk.vertices.shape}")
    a = sched.alphas[k]
    if a <= 0.0:
        raise ScheduleError(f"alpha[{k}] = {a}: corrupted schedule")
    return MeshSample((hk.vertices - np.sqrt(1.0 - a) * eps_pred) / np.sqrt(a), 0)


def hop_sigma(sched: NoiseSchedule, k_from: int, k_to: int) -> float:
    """Noise scale for a hop; indexed by the source step, zero on the hop into step 0."""
    if k_to == 0:
        return 0.0
    return sched.sigma(k_from)


def reverse_step(
    hk: MeshSample,
    k_from: int,
    k_to: int,
    eps_pred: np.ndarray,
    sched: NoiseSchedule,
    z: np.ndarray | None = None,
    sigma: float | None = None,
) -> MeshSample:
    """Generalised DDIM hop ``k_from -> k_to``.

    ``sigma`` defaults to the schedule's value for ``k_from``. Passing ``z=None``
    drops the noise term (the coefficient still uses ``sigma``).
    """
    if not sched.K >= k_from > k_to >= 0:
        raise ScheduleError(f"need K >= k_from > k_to >= 0, got {k_from} -> {k_to}")
    if hk.step != k_from:
        raise ValueError(f"sample is tagged step {hk.step}, hop starts at {k_from}")
    if not np.all(np.isfinite(eps_pred)):
        raise ValueError(f"non-finite noise prediction at step {k_from}")
    if sigma is None:
        sigma = sched.sigma(k_from)
    a_to = sched.alphas[k_to]
    var_dir = 1.0 - a_to - sigma**2
    if var_dir < -1e-12:
        raise ScheduleError(
            f"sigma={sigma:.3g} too large for hop {k_from}->{k_to} (1 - alpha = {1 - a_to:.3g})"
        )
    h0_hat = estimate_h0(hk, eps_pred, k_from, sched).vertices
    out = np.sqrt(max(var_dir, 0.0)) * eps_pred + np.sqrt(a_to) * h0_hat
    if z is not None and sigma > 0.0:
        out = out + sigma * z
    return MeshSample(out, k_to)


def sample_chain(model, hK: MeshSample, sched: NoiseSchedule, rng: np.random.Generator, context=None):
    """Unguided reverse chain over ``sched.steps``; returns the step-0 sample."""
    h = hK
    for k_from, k_to in sched.hops():
        eps = model.evaluate(h.vertices, k_from, context)
        sigma = hop_sigma(sched, k_from, k_to)
        z = draw_noise(rng, h.vertices.shape) if sigma > 0.0 else None
        h = reverse_step(h, k_from, k_to, eps, sched, z, sigma=sigma)
    return h
