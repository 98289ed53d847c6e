"""Small shared problem builders for tests."""

import numpy as np

from meshdiff.diffusion import build_schedule
from meshdiff.guidance import PriorDistribution
from meshdiff.models import AnalyticGaussianScore, DenoiserConfig, TokenDenoiser
from meshdiff.synthdata import PriorSpec, build_dataset, generate_instance, generate_prior


def chain_problem(seed=0, ddim_steps=40, eta=0.0, prior_sigma=0.05):
    sched = build_schedule(200, eta=eta, ddim_steps=ddim_steps)
    rng = np.random.default_rng(seed)
    inst = generate_instance("chain", 0.3 * rng.standard_normal(15), seed=seed)
    prior = generate_prior(inst, PriorSpec(prior_sigma, 0.0, 25), seed=seed + 1)
    model = AnalyticGaussianScore(inst.gt_mesh.vertices + 0.1, 0.05, sched)
    return inst, prior, model, sched


def small_denoiser(inst, seed=0, output="epsilon"):
    cfg = DenoiserConfig(V=inst.V, d_id=6, d_step=5, d_ctx=inst.context.shape[1], d_attn=5, d_ff=8, output=output)
    return TokenDenoiser(cfg, seed=seed)


class NoVJP:
    def __init__(self, model):
        self.model = model

    def evaluate(self, hk, k, context=None):
        return self.model.evaluate(hk, k, context)


class NaNGradient:
    """Valid predictions, but the Jacobian product blows up below a step."""

    def __init__(self, model, below):
        self.model, self.below = model, below

    def evaluate(self, hk, k, context=None):
        return self.model.evaluate(hk, k, context)

    def vjp(self, hk, k, context, cotangent):
        out = self.model.vjp(hk, k, context, cotangent)
        return np.full_like(out, np.nan) if k < self.below else out


def biped_benchmark(n=300, seed=0):
    ds = build_dataset(n, "biped", seed=seed)
    sched = build_schedule(200, ddim_steps=40)
    train = np.stack([i.gt_mesh.vertices for i in ds.split("train")])
    return ds, AnalyticGaussianScore(train.mean(0), train.var(0), sched), sched


def point_prior(pose, n=1):
    return PriorDistribution(np.repeat(pose[None], n, axis=0))
