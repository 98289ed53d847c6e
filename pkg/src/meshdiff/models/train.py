"""Minibatch training of the token denoiser with Adam."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from ..diffusion import NoiseSchedule
from .denoiser import PARAM_ORDER, TokenDenoiser
from .losses import (
    TARGET_MODES,
    LossWeights,
    geometry_losses_and_grad,
    step_difference_target,
    step_difference_to_eps,
)

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ("update_index", "L_Diff", "L_v", "L_j", "L_n", "L_e", "total")
DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    num_updates: int = 2000
    seed: int = 0
    target_mode: str = "epsilon"

    def __post_init__(self):
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}")
        if self.lr < 0 or self.batch_size < 1 or self.num_updates < 0:
            raise ValueError("need lr >= 0, batch_size >= 1, num_updates >= 0")


class Adam:
    def __init__(self, params: dict, cfg: OptimConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        c = self.cfg
        if c.lr == 0.0:
            return
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        for name in PARAM_ORDER:
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            params[name] -= c.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + c.adam_eps)


class StepDifferenceAdapter:
    """Present a model trained on ``h_{k-1} - h_k`` targets as a noise predictor."""

    def __init__(self, model: TokenDenoiser, sched: NoiseSchedule):
        self.model = model
        self.sched = sched

    def evaluate(self, hk, k, context=None):
        return step_difference_to_eps(self.model.evaluate(hk, k, context), hk, k, self.sched)

    def vjp(self, hk, k, context, cotangent):
        a0, a1 = self.sched.alphas[k - 1], self.sched.alphas[k]
        ca, cb = np.sqrt(a0) - np.sqrt(a1), np.sqrt(1 - a0) - np.sqrt(1 - a1)
        r, s = np.sqrt(a1), np.sqrt(1 - a1)
        denom = cb - ca * s / r
        return (self.model.vjp(hk, k, context, cotangent) - ca / r * cotangent) / denom


def batch_loss_and_grads(model: TokenDenoiser, batch, sched: NoiseSchedule, weights: LossWeights, target_mode="epsilon"):
    """Mean componentwise losses over a batch and the parameter gradient of the total.

    ``batch`` is ``(h0, ctx, k, z, topology, f)`` with ``h0, z`` of shape ``(B, V, 3)``.
    Geometry losses act on the one-jump clean estimate built from the prediction.
    """
    h0, ctx, k, z, topo, f = batch
    B = h0.shape[0]
    a = sched.alphas[k][:, None, None]
    hk = np.sqrt(a) * h0 + np.sqrt(1 - a) * z
    pred, cache = model.forward(hk, k, ctx)

    if target_mode == "epsilon":
        target = z
        eps = pred
        d_eps_d_pred = 1.0
    else:
        kk = k[:, None, None]
        target = step_difference_target(h0, z, kk, sched)
        eps = step_difference_to_eps(pred, hk, kk, sched)
        a0 = sched.alphas[k - 1][:, None, None]
        ca, cb = np.sqrt(a0) - np.sqrt(a), np.sqrt(1 - a0) - np.sqrt(1 - a)
        d_eps_d_pred = 1.0 / (cb - ca * np.sqrt(1 - a) / np.sqrt(a))

    resid = target - pred
    L_diff = np.sum(resid**2, axis=(1, 2))
    d_pred = -2.0 * resid / B

    h0_hat = (hk - np.sqrt(1 - a) * eps) / np.sqrt(a)
    geo, geo_grad = geometry_losses_and_grad(h0_hat, h0, topo, f)
    lam = (weights.lambda_v, weights.lambda_j, weights.lambda_n, weights.lambda_e)
    d_h0_hat = sum(l * g for l, g in zip(lam, geo_grad)) / B
    d_pred = d_pred + d_eps_d_pred * (-np.sqrt(1 - a) / np.sqrt(a)) * d_h0_hat

    _, grads = model.backward(cache, d_pred)
    parts = (float(np.mean(L_diff)), *(float(np.mean(x)) for x in geo))
    total = parts[0] + sum(l * p for l, p in zip(lam, parts[1:]))
    return parts, total, grads


def _stack_instances(instances):
    h0 = np.stack([inst.gt_mesh.vertices for inst in instances])
    ctx = np.stack([inst.context for inst in instances])
    topo, f = instances[0].topology, instances[0].f
    if any(inst.V != topo.V for inst in instances):
        raise ValueError("training set mixes vertex counts; use one template per model")
    return h0, ctx, topo, f


def train(model: TokenDenoiser, dataset, sched: NoiseSchedule, weights: LossWeights, optim: OptimConfig):
    """Train in place; returns ``(model, curve)`` with one row per update."""
    instances = list(dataset)
    if not instances:
        raise ValueError("empty training set")
    h0_all, ctx_all, topo, f = _stack_instances(instances)
    rng = np.random.default_rng(optim.seed)
    opt = Adam(model.params, optim)
    curve = []
    for it in range(optim.num_updates):
        idx = rng.integers(0, len(instances), size=optim.batch_size)
        k = rng.integers(1, sched.K + 1, size=optim.batch_size)
        z = rng.standard_normal((optim.batch_size,) + h0_all.shape[1:])
        batch = (h0_all[idx], ctx_all[idx], k, z, topo, f)
        parts, total, grads = batch_loss_and_grads(model, batch, sched, weights, optim.target_mode)
        if not np.isfinite(total) or total > DIVERGENCE_LIMIT:
            raise TrainingDiverged(f"loss {total:.3g} at update {it} (parts {parts})")
        curve.append((it, *parts, total))
        opt.step(model.params, grads)
        if it % 500 == 0:
            logger.info("update %d total %.4f diff %.4f", it, total, parts[0])
    return model, curve


def evaluation_loss(model: TokenDenoiser, dataset, sched: NoiseSchedule, weights: LossWeights, target_mode="epsilon", n=4096, seed=0):
    """Total loss on one fixed draw of ``(instance, k, z)``; compares models without batch noise.

    Returns ``(total, parts)`` with parts ``(L_Diff, L_v, L_j, L_n, L_e)``.
    """
    h0_all, ctx_all, topo, f = _stack_instances(list(dataset))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, h0_all.shape[0], size=n)
    k = rng.integers(1, sched.K + 1, size=n)
    z = rng.standard_normal((n,) + h0_all.shape[1:])
    parts, total, _ = batch_loss_and_grads(model, (h0_all[idx], ctx_all[idx], k, z, topo, f), sched, weights, target_mode)
    return total, parts


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in curve:
            w.writerow([row[0], *(repr(float(x)) for x in row[1:])])
