"""Prior-alignment guidance for the reverse chain.

At every visited step the chain forms the one-jump clean estimate ``h0_hat``,
measures its gap to the prior pose samples through the linear joint regressor,
and, while the relative gap stays above a threshold, subtracts the scaled
gradient of that gap with respect to the *noisy* state. Once the relative gap
drops below the threshold guidance is switched off for good.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffusion import MeshSample, NoiseSchedule, ScheduleError, estimate_h0, hop_sigma
from .geometry import MeshToPoseMap, apply_map
from .models.base import has_vjp

__all__ = [
    "DiffusionTrace",
    "EnsembleResult",
    "GuidanceConfig",
    "GuidanceError",
    "PriorDistribution",
    "alignment_gradient",
    "dat_reverse_process",
    "gap",
    "run_ensemble",
    "unguided_reverse_process",
]

GRADIENT_MODES = ("full", "stop_gradient")
ALIGN_TARGETS = ("h0_hat", "hk")


class GuidanceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PriorDistribution:
    samples: np.ndarray  # (N, J, 3)
    noise_level: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 2:
            s = s[None]
        if s.ndim != 3 or s.shape[-1] != 3 or s.shape[0] < 1:
            raise ValueError(f"prior samples must have shape (N, J, 3), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("prior samples must be finite")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        object.__setattr__(self, "samples", s)

    @property
    def N(self) -> int:
        return self.samples.shape[0]

    @property
    def J(self) -> int:
        return self.samples.shape[1]

    def center(self) -> "PriorDistribution":
        """Single-pose prior at the sample mean."""
        return PriorDistribution(self.samples.mean(axis=0, keepdims=True), 0.0)


@dataclass(frozen=True)
class GuidanceConfig:
    r: float = 0.05
    gamma: float = 0.2
    gradient_mode: str = "full"
    num_chains: int = 25
    normalize_by_n: bool = False
    use_activation: bool = True
    # "hk" pulls the noisy state itself toward the prior (the disrupted baseline)
    align_target: str = "h0_hat"

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"threshold r must be positive, got {self.r}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.align_target not in ALIGN_TARGETS:
            raise ValueError(f"align_target must be one of {ALIGN_TARGETS}")
        if self.num_chains < 1:
            raise ValueError("num_chains must be >= 1")


@dataclass
class DiffusionTrace:
    """Per visited step records; arrays are (steps,) or (steps, chains)."""

    k: np.ndarray
    gap: np.ndarray
    ratio: np.ndarray
    act: np.ndarray
    h0_hat: np.ndarray | None = None
    hk: np.ndarray | None = None

    def chain(self, b: int) -> "DiffusionTrace":
        if self.gap.ndim == 1:
            return self
        return DiffusionTrace(
            self.k,
            self.gap[:, b],
            self.ratio[:, b],
            self.act[:, b],
            None if self.h0_hat is None else self.h0_hat[:, b],
            None if self.hk is None else self.hk[:, b],
        )

    def steps_to_threshold(self, r: float) -> np.ndarray:
        """Visited steps until the relative gap first falls below ``r`` (len+1 if never)."""
        ratio = self.ratio if self.ratio.ndim == 2 else self.ratio[:, None]
        below = ratio < r
        first = np.where(below.any(axis=0), below.argmax(axis=0) + 1, len(self.k) + 1)
        return first if self.ratio.ndim == 2 else first[0]

    def rows(self, chain_offset: int = 0):
        gap = self.gap if self.gap.ndim == 2 else self.gap[:, None]
        ratio = self.ratio if self.ratio.ndim == 2 else self.ratio[:, None]
        act = self.act if self.act.ndim == 2 else self.act[:, None]
        for b in range(gap.shape[1]):
            for i, k in enumerate(self.k):
                yield (chain_offset + b, int(k), repr(float(gap[i, b])), repr(float(ratio[i, b])), int(act[i, b]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "k", "D_k", "R_k", "act"])
            w.writerows(self.rows())


def _gap_of_pose(pose: np.ndarray, samples: np.ndarray) -> np.ndarray:
    # pose (..., J, 3), samples (N, J, 3) -> (...)
    diff = samples - pose[..., None, :, :]
    return np.sum(diff**2, axis=(-3, -2, -1))


def _gap_grad_pose(pose: np.ndarray, samples: np.ndarray) -> np.ndarray:
    return 2.0 * (samples.shape[0] * pose - samples.sum(axis=0))


def gap(h0_hat, prior: PriorDistribution, f: MeshToPoseMap):
    """Sum over prior samples of the squared distance to the regressed pose."""
    if isinstance(h0_hat, MeshSample):
        if h0_hat.step != 0:
            raise ValueError(f"gap is measured on a clean estimate, got step {h0_hat.step}")
        h0_hat = h0_hat.vertices
    pose = apply_map(f, h0_hat)
    if pose.shape[-2:] != prior.samples.shape[-2:]:
        raise ValueError(f"regressed pose {pose.shape[-2:]} != prior joints {prior.samples.shape[-2:]}")
    out = _gap_of_pose(pose, prior.samples)
    return float(out) if np.ndim(out) == 0 else out


def _eval_step(hk, k, model, prior, f, sched, context):
    eps = model.evaluate(hk, k, context)
    a = sched.alphas[k]
    h0_hat = (hk - np.sqrt(1.0 - a) * eps) / np.sqrt(a)
    pose = f.M @ h0_hat
    return eps, h0_hat, pose, _gap_of_pose(pose, prior.samples)


def _grad_through_estimate(hk, k, model, f, sched, context, pose, samples, mode):
    a = sched.alphas[k]
    cot = f.M.T @ _gap_grad_pose(pose, samples)  # dD / dh0_hat
    if mode == "stop_gradient":
        return cot / np.sqrt(a)
    if not has_vjp(model):
        raise GuidanceError("full gradient mode needs a model with a vector-Jacobian product")
    return (cot - np.sqrt(1.0 - a) * model.vjp(hk, k, context, cot)) / np.sqrt(a)


def alignment_gradient(
    hk: MeshSample,
    k: int,
    model,
    prior: PriorDistribution,
    f: MeshToPoseMap,
    sched: NoiseSchedule,
    mode: str = "full",
    context=None,
) -> np.ndarray:
    """Gradient of the prior gap of ``h0_hat(hk)`` with respect to ``hk``."""
    if not 1 <= k <= sched.K:
        raise ScheduleError(f"step {k} outside [1, {sched.K}]")
    if mode not in GRADIENT_MODES:
        raise ValueError(f"mode must be one of {GRADIENT_MODES}")
    x = hk.vertices if isinstance(hk, MeshSample) else np.asarray(hk, dtype=np.float64)
    _, _, pose, _ = _eval_step(x, k, model, prior, f, sched, context)
    return _grad_through_estimate(x, k, model, f, sched, context, pose, prior.samples, mode)


def _as_generators(rng, B):
    if isinstance(rng, np.random.Generator):
        rng = [rng]
    elif isinstance(rng, (int, np.integer)):
        rng = [int(rng)]
    rngs = [r if isinstance(r, np.random.Generator) else np.random.default_rng(int(r)) for r in rng]
    if len(rngs) != B:
        raise ValueError(f"need one generator or seed per chain ({B}), got {len(rngs)}")
    return rngs


def _run_chains(hK, model, prior, f, sched, cfg, rngs, context, guided, keep_samples):
    """Batched chains ``(B, V, 3)``; failed chains are frozen and reported, not raised."""
    h = hK.copy()
    B = h.shape[0]
    samples = prior.samples
    scale = 1.0 / prior.N if cfg.normalize_by_n else 1.0
    hops = sched.hops()
    n = len(hops)
    gaps = np.zeros((n, B))
    ratios = np.zeros((n, B))
    acts = np.zeros((n, B), dtype=bool)
    h0_snap = np.zeros((n,) + h.shape) if keep_samples else None
    hk_snap = np.zeros((n,) + h.shape) if keep_samples else None
    latch = np.ones(B, dtype=bool)
    alive = np.ones(B, dtype=bool)
    failures: dict[int, str] = {}
    D_K = None

    for i, (k_from, k_to) in enumerate(hops):
        if keep_samples:
            hk_snap[i] = h
        eps, h0_hat, pose, D = _eval_step(h, k_from, model, prior, f, sched, context)
        if D_K is None:
            D_K = D.copy()
            R = np.ones(B)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                R = np.where(D_K > 0, D / np.where(D_K > 0, D_K, 1.0), 0.0)
        gaps[i], ratios[i] = D, R
        if keep_samples:
            h0_snap[i] = h0_hat

        sigma = hop_sigma(sched, k_from, k_to)
        a_to = sched.alphas[k_to]
        var_dir = 1.0 - a_to - sigma**2
        if var_dir < -1e-12:
            raise ScheduleError(f"sigma={sigma:.3g} too large for hop {k_from}->{k_to}")
        base = np.sqrt(max(var_dir, 0.0)) * eps + np.sqrt(a_to) * h0_hat

        if guided:
            if cfg.use_activation:
                fire = latch & (R >= cfg.r)
                latch = fire.copy()
            else:
                fire = np.ones(B, dtype=bool)
            fire &= alive
            acts[i] = fire
            if fire.any():
                if cfg.align_target == "hk":
                    grad = f.M.T @ _gap_grad_pose(f.M @ h, samples)
                else:
                    grad = _grad_through_estimate(h, k_from, model, f, sched, context, pose, samples, cfg.gradient_mode)
                bad = fire & ~np.all(np.isfinite(grad), axis=(-2, -1))
                for b in np.flatnonzero(bad):
                    failures[int(b)] = f"non-finite guidance gradient at step k={k_from}"
                alive &= ~bad
                fire &= ~bad
                step = np.where(fire[:, None, None], cfg.gamma * scale * np.nan_to_num(grad), 0.0)
                base = np.where(fire[:, None, None], base - step, base)

        if sigma > 0.0:
            z = np.stack([r.standard_normal(h.shape[1:]) for r in rngs])
            base = base + sigma * z
        diverged = alive & ~np.all(np.isfinite(base), axis=(-2, -1))
        for b in np.flatnonzero(diverged):
            failures[int(b)] = f"non-finite state after hop {k_from}->{k_to}"
        alive &= ~diverged
        h = np.where(alive[:, None, None], base, h)

    trace = DiffusionTrace(np.array([kf for kf, _ in hops]), gaps, ratios, acts, h0_snap, hk_snap)
    return h, trace, failures


def _prepare(hK, sched):
    x = hK.vertices if isinstance(hK, MeshSample) else np.asarray(hK, dtype=np.float64)
    step = hK.step if isinstance(hK, MeshSample) else sched.K
    if step != sched.K:
        raise ValueError(f"reverse process starts at step K={sched.K}, sample is tagged {step}")
    single = x.ndim == 2
    return (x[None] if single else x), single


def _finish(h, trace, failures, single):
    if single:
        if failures:
            raise GuidanceError(failures[0])
        return MeshSample(h[0], 0), trace.chain(0)
    return MeshSample(h, 0), trace


def dat_reverse_process(
    hK,
    model,
    prior: PriorDistribution,
    f: MeshToPoseMap,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    rng_seed,
    context=None,
    keep_samples: bool = False,
):
    """Guided reverse chain from ``hK`` (``(V, 3)`` or a ``(B, V, 3)`` batch) to step 0.

    ``rng_seed`` is an int or Generator for a single chain, or one per chain.
    Returns ``(MeshSample at step 0, DiffusionTrace)``.
    """
    x, single = _prepare(hK, sched)
    rngs = _as_generators(rng_seed, x.shape[0])
    h, trace, failures = _run_chains(x, model, prior, f, sched, cfg, rngs, context, True, keep_samples)
    if not single and failures:
        raise GuidanceError("; ".join(f"chain {b}: {m}" for b, m in sorted(failures.items())))
    return _finish(h, trace, failures, single)


def unguided_reverse_process(hK, model, prior, f, sched, rng_seed, context=None, keep_samples=False):
    """The same chain with guidance disabled; the prior is only used to record gaps."""
    x, single = _prepare(hK, sched)
    rngs = _as_generators(rng_seed, x.shape[0])
    h, trace, failures = _run_chains(x, model, prior, f, sched, GuidanceConfig(), rngs, context, False, keep_samples)
    return _finish(h, trace, failures, single)


@dataclass
class EnsembleResult:
    samples: np.ndarray  # (N, V, 3); failed chains hold their last finite state
    trace: DiffusionTrace
    seeds: list[int]
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def ok(self) -> np.ndarray:
        mask = np.ones(len(self.seeds), dtype=bool)
        mask[list(self.failures)] = False
        return mask

    def traces(self) -> list[DiffusionTrace]:
        return [self.trace.chain(b) for b in range(len(self.seeds))]


def chain_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def run_ensemble(
    num_vertices: int,
    model,
    prior: PriorDistribution,
    f: MeshToPoseMap,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    seeds: Sequence[int] | int = 0,
    context=None,
    guided: bool = True,
    keep_samples: bool = False,
) -> EnsembleResult:
    """Independent chains, each seeded on its own and started from its own Gaussian draw.

    Chain ``b`` draws ``hK`` and then its hop noise from ``default_rng(seeds[b])``,
    so it is bitwise identical to a single-chain run fed that same generator.
    """
    if isinstance(seeds, (int, np.integer)):
        seeds = chain_seeds(int(seeds), cfg.num_chains)
    seeds = [int(s) for s in seeds]
    if len(seeds) < 1:
        raise ValueError("need at least one chain")
    rngs = [np.random.default_rng(s) for s in seeds]
    hK = np.stack([r.standard_normal((num_vertices, 3)) for r in rngs])
    h, trace, failures = _run_chains(hK, model, prior, f, sched, cfg, rngs, context, guided, keep_samples)
    return EnsembleResult(h, trace, seeds, failures)
