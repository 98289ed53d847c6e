"""Experiment runners behind the CLI: data generation, training, sampling, ablation.

Every runner takes a validated :class:`RunConfig`, writes only new files into
``cfg.output_dir`` (the config that produced them included) and returns a
small summary dict. CSVs contain no wall-clock data, so a rerun from the
emitted ``config.json`` reproduces them byte for byte; timings go to
``timing.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .diffusion import NoiseSchedule, build_schedule, save_schedule
from .flatio import write_flat
from .geometry import MetricReport, evaluate
from .guidance import GuidanceConfig, chain_seeds, gap, run_ensemble
from .models import (
    AnalyticGaussianScore,
    DenoiserConfig,
    LossWeights,
    OptimConfig,
    StepDifferenceAdapter,
    TokenDenoiser,
    aggregate_prediction,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .models.train import evaluation_loss, write_curve
from .synthdata import Dataset, PoseSampler, PriorSpec, build_dataset, dataset_from_manifest, generate_prior

logger = logging.getLogger(__name__)

TUNE_HALVINGS = 8


def derive_seed(*keys) -> int:
    """Stable integer seed from a mix of ints and strings."""
    words = []
    for key in keys:
        if isinstance(key, str):
            words.append(int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little"))
        else:
            words.append(int(key))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return out


def _write_rows(path, header, rows) -> None:
    def fmt(x):
        if isinstance(x, (float, np.floating)):
            return repr(float(x))
        if isinstance(x, (np.integer, np.bool_)):
            return int(x)
        return x

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


# -- building blocks -----------------------------------------------------------


def schedule_from(cfg: RunConfig, ddim_steps: int | None = None) -> NoiseSchedule:
    s = cfg.schedule
    return build_schedule(s.K, s.alpha_first, s.alpha_last, s.eta, ddim_steps or s.ddim_steps)


def dataset_from(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.manifest:
        return dataset_from_manifest(d.manifest)
    return build_dataset(
        d.num_instances,
        d.template,
        PoseSampler(d.pose_std, d.root_std),
        seed=cfg.seed,
        scale=d.scale,
        test_fraction=d.test_fraction,
        context_noise=d.context_noise,
    )


def guidance_from(cfg: RunConfig) -> GuidanceConfig:
    g = cfg.guidance
    return GuidanceConfig(g.r, g.gamma, g.gradient_mode, g.num_chains, g.normalize_by_n)


def prior_spec_from(cfg: RunConfig) -> PriorSpec:
    return PriorSpec(cfg.data.prior_sigma, cfg.data.prior_bias, cfg.data.prior_N)


def denoiser_config(cfg: RunConfig, dataset: Dataset) -> DenoiserConfig:
    m, s, inst = cfg.model, cfg.schedule, dataset.instances[0]
    return DenoiserConfig(
        V=inst.V,
        d_id=m.d_id,
        d_step=m.d_step,
        d_ctx=inst.context.shape[1],
        d_attn=m.d_attn,
        d_ff=m.d_ff,
        K=s.K,
        output=m.output,
        alpha_first=s.alpha_first,
        alpha_last=s.alpha_last,
    )


def fit_gaussian(dataset: Dataset, sched: NoiseSchedule, floor: float = 1e-8) -> AnalyticGaussianScore:
    """Exact noise predictor for a diagonal Gaussian fitted to the training meshes."""
    meshes = np.stack([inst.gt_mesh.vertices for inst in dataset.split("train") or dataset.instances])
    return AnalyticGaussianScore(meshes.mean(axis=0), np.maximum(meshes.var(axis=0), floor), sched)


def model_from(cfg: RunConfig, dataset: Dataset, sched: NoiseSchedule):
    """Score model for sampling: analytic fit, a checkpoint, or a fresh initialisation."""
    if cfg.model.kind == "analytic":
        return fit_gaussian(dataset, sched)
    arch = denoiser_config(cfg, dataset)
    if cfg.model.checkpoint:
        net, meta = load_checkpoint(cfg.model.checkpoint, expect=arch)
        target_mode = meta["target_mode"]
    else:
        net, target_mode = TokenDenoiser(arch, seed=cfg.model.init_seed), cfg.model.target_mode
    return StepDifferenceAdapter(net, sched) if target_mode == "step_difference" else net


def _context(model, inst):
    return None if isinstance(model, AnalyticGaussianScore) else inst.context


# -- trials ----------------------------------------------------------------------


@dataclass
class TrialResult:
    report: MetricReport | None  # None when every chain failed
    final_gap: float
    steps_to_threshold: float
    failures: int
    gap_curve: np.ndarray  # mean D_k over chains, per visited step
    k: np.ndarray


def run_trial(inst, model, prior, sched, gcfg, seed, guided=True, guide_prior=None, thresholds=(0.05, 0.15)):
    """One ensemble on one instance; the gap is always reported against ``prior``."""
    with np.errstate(over="ignore", invalid="ignore"):
        guide = prior if guide_prior is None else guide_prior
        res = run_ensemble(inst.V, model, guide, inst.f, sched, gcfg, seeds=seed, context=_context(model, inst), guided=guided)
        ok = res.ok
        report = None
        final_gap = float("nan")
        if ok.any():
            pred = aggregate_prediction(res.samples[ok])
            report = evaluate(pred, inst.gt_mesh, inst.f, thresholds)
            final_gap = float(np.mean(gap(res.samples[ok], prior, inst.f)))
        steps = float(np.mean(res.trace.steps_to_threshold(gcfg.r)))
        curve = np.mean(res.trace.gap, axis=1)
    return TrialResult(report, final_gap, steps, len(res.failures), curve, res.trace.k)


def _trial_inputs(cfg: RunConfig, dataset: Dataset, trial: int, tag: str = "trial"):
    pool = dataset.split("test") or dataset.instances
    index = trial % len(pool)
    inst = pool[index]
    prior = generate_prior(inst, prior_spec_from(cfg), derive_seed(cfg.seed, tag, trial, "prior"))
    return index, inst, prior, derive_seed(cfg.seed, tag, trial, "chains")


def variant_setup(name: str, base: GuidanceConfig, disrupted_gamma: float):
    """``(guidance config, guided flag, use single-pose prior)`` for an ablation row."""
    if name == "standard":
        return base, False, False
    if name == "dat":
        return base, True, False
    if name == "dat_no_activation":
        return replace(base, use_activation=False), True, False
    if name == "disrupted":
        return replace(base, gamma=disrupted_gamma, use_activation=False, align_target="hk"), True, False
    if name == "single_pose_prior":
        return base, True, True
    raise ValueError(f"unknown ablation variant {name!r}")


def run_variant(cfg, dataset, model, sched, name, disrupted_gamma, trials, tag="trial"):
    gcfg, guided, single = variant_setup(name, guidance_from(cfg), disrupted_gamma)
    out = []
    for t in trials:
        index, inst, prior, seed = _trial_inputs(cfg, dataset, t, tag)
        guide = prior.center() if single else None
        res = run_trial(inst, model, prior, sched, gcfg, seed, guided, guide, tuple(cfg.f_thresholds))
        out.append((t, index, res))
    return gcfg, out


def _mean(values):
    vals = [v for v in values if np.isfinite(v)]
    return float(np.mean(vals)) if len(vals) == len(values) and vals else float("nan")


def _summary(results):
    reps = [r.report for _, _, r in results]
    pick = lambda key: _mean([getattr(x, key) if x is not None else float("nan") for x in reps])  # noqa: E731
    return {
        "mpve": pick("mpve"),
        "mpjpe": pick("mpjpe"),
        "pa_mpjpe": pick("pa_mpjpe"),
        "final_gap": _mean([r.final_gap for _, _, r in results]),
        "steps_to_threshold": float(np.mean([r.steps_to_threshold for _, _, r in results])),
        "failures": int(sum(r.failures for _, _, r in results)),
    }


def tune_disrupted_gamma(cfg, dataset, model, sched):
    """Largest-to-smallest halvings of gamma on held-out tuning seeds; lowest finite MPVE wins."""
    rows = []
    trials = range(cfg.ablation.tune_trials)
    for j in range(TUNE_HALVINGS):
        g = cfg.guidance.gamma * 2.0**-j
        _, res = run_variant(cfg, dataset, model, sched, "disrupted", g, trials, tag="tune")
        s = _summary(res)
        rows.append((g, s["mpve"], s["failures"]))
    usable = [r for r in rows if r[2] == 0 and np.isfinite(r[1])]
    best = min(usable, key=lambda r: r[1])[0] if usable else rows[-1][0]
    return best, rows


# -- commands ------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> dict:
    cfg.check()
    out = _out_dir(cfg)
    ds = dataset_from(cfg)
    ds.write_manifest(out / "manifest.json")
    ds.write_meshes(out / "meshes.bin")
    return {"instances": len(ds), "train": len(ds.train), "test": len(ds.test), "output_dir": str(out)}


def cmd_train(cfg: RunConfig) -> dict:
    cfg.check()
    out = _out_dir(cfg)
    t0 = time.perf_counter()
    sched = schedule_from(cfg)
    ds = dataset_from(cfg)
    ds.write_manifest(out / "manifest.json")
    save_schedule(sched, out / "schedule.txt")
    net = TokenDenoiser(denoiser_config(cfg, ds), seed=cfg.model.init_seed)
    t = cfg.train
    weights = LossWeights(t.lambda_v, t.lambda_j, t.lambda_n, t.lambda_e)
    optim = OptimConfig(
        lr=t.lr,
        beta1=t.beta1,
        beta2=t.beta2,
        batch_size=t.batch_size,
        num_updates=t.num_updates,
        seed=derive_seed(cfg.seed, "train"),
        target_mode=cfg.model.target_mode,
    )
    train_set = ds.split("train") or ds.instances
    eval_seed = derive_seed(cfg.seed, "train-eval")
    initial_eval, _ = evaluation_loss(net, train_set, sched, weights, cfg.model.target_mode, seed=eval_seed)
    net, curve = train(net, train_set, sched, weights, optim)
    final_eval, _ = evaluation_loss(net, train_set, sched, weights, cfg.model.target_mode, seed=eval_seed)
    _write_rows(out / "eval_loss.csv", ("model", "total"), [("initial", initial_eval), ("final", final_eval)])
    write_curve(curve, out / "loss.csv")
    save_checkpoint(net, out / "model.ckpt", cfg.model.target_mode, cfg.model.init_seed)
    elapsed = time.perf_counter() - t0
    (out / "timing.json").write_text(json.dumps({"train_seconds": elapsed}, indent=2) + "\n")
    first = curve[0][-1] if curve else float("nan")
    last = curve[-1][-1] if curve else float("nan")
    return {
        "checkpoint": str(out / "model.ckpt"),
        "initial_loss": first,
        "final_loss": last,
        "initial_eval_loss": initial_eval,
        "final_eval_loss": final_eval,
        "num_params": net.num_params,
        "output_dir": str(out),
    }


def cmd_sample(cfg: RunConfig) -> dict:
    cfg.check()
    out = _out_dir(cfg)
    sched = schedule_from(cfg)
    ds = dataset_from(cfg)
    model = model_from(cfg, ds, sched)
    pool = ds.split("test") or ds.instances
    if cfg.data.instance >= len(pool):
        raise ValueError(f"data.instance={cfg.data.instance} but only {len(pool)} held-out instances")
    inst = pool[cfg.data.instance]
    prior = generate_prior(inst, prior_spec_from(cfg), derive_seed(cfg.seed, "sample", cfg.data.instance, "prior"))
    gcfg = guidance_from(cfg)
    seeds = chain_seeds(derive_seed(cfg.seed, "sample", cfg.data.instance, "chains"), gcfg.num_chains)

    t0 = time.perf_counter()
    res = run_ensemble(inst.V, model, prior, inst.f, sched, gcfg, seeds=seeds, context=_context(model, inst), keep_samples=True)
    elapsed = time.perf_counter() - t0

    res.trace.to_csv(out / "trace.csv")
    n_steps, B = res.trace.gap.shape
    steps = np.concatenate([res.trace.hk, res.trace.h0_hat], axis=-2)  # (steps, B, 2V, 3)
    records = np.swapaxes(steps, 0, 1).reshape(B * n_steps, -1)
    write_flat(out / "samples.bin", records, inst.V, inst.f.J, sched.K)
    write_flat(out / "final_meshes.bin", res.samples.reshape(B, -1), inst.V, inst.f.J, 0)

    thresholds = tuple(cfg.f_thresholds)
    ok = res.ok
    per_chain = [(b, evaluate(res.samples[b], inst.gt_mesh, inst.f, thresholds)) for b in np.flatnonzero(ok)]
    agg = evaluate(aggregate_prediction(res.samples[ok]), inst.gt_mesh, inst.f, thresholds) if ok.any() else None
    rows = per_chain + ([("aggregate", agg)] if agg is not None else [])
    MetricReport.write_csv(out / "metrics.csv", rows, index_name="chain")
    extra = {
        "final_gap": float(np.mean(gap(res.samples[ok], prior, inst.f))) if ok.any() else None,
        "steps_to_threshold": float(np.mean(res.trace.steps_to_threshold(gcfg.r))),
        "failures": {str(k): v for k, v in res.failures.items()},
        "instance": cfg.data.instance,
    }
    if agg is not None:
        agg.to_json(out / "metrics.json", **extra)

    summary = {"output_dir": str(out), "aggregate": None if agg is None else vars(agg), **extra}
    if isinstance(model, AnalyticGaussianScore):
        summary["oracle"] = gaussian_oracle_report(model, sched, res.samples[ok])
        summary["oracle"]["guided"] = gcfg.gamma > 0  # the moment oracle only applies unguided
        (out / "oracle.json").write_text(json.dumps(summary["oracle"], indent=2, sort_keys=True) + "\n")
    timing = {"sample_seconds": elapsed, "seconds_per_chain": elapsed / B}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    return summary


def gaussian_oracle_report(model: AnalyticGaussianScore, sched: NoiseSchedule, samples: np.ndarray) -> dict:
    """Sample moments against the exact moments of the chain and of the target.

    Meaningful for unguided runs (``gamma = 0``); guidance shifts the moments.
    """
    m_chain, v_chain = model.chain_moments(sched)
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    var = samples.var(axis=0, ddof=1) if n > 1 else np.zeros_like(model.mean)
    return {
        "num_chains": int(n),
        "max_mean_error_vs_chain": float(np.max(np.abs(mean - m_chain))),
        "max_mean_error_vs_target": float(np.max(np.abs(mean - model.mean))),
        "max_rel_var_error_vs_chain": float(np.max(np.abs(var / v_chain - 1))),
        "max_rel_var_error_vs_target": float(np.max(np.abs(var / model.var - 1))),
        "mean_standard_error": float(np.max(np.sqrt(v_chain / max(n, 1)))),
    }


def cmd_ablate(cfg: RunConfig) -> dict:
    cfg.check()
    out = _out_dir(cfg)
    a = cfg.ablation
    sched = schedule_from(cfg)
    ds = dataset_from(cfg)
    model = model_from(cfg, ds, sched)
    trials = range(a.num_trials)
    timing = {}

    disrupted_gamma = a.disrupted_gamma
    if "disrupted" in a.variants and disrupted_gamma is None:
        t0 = time.perf_counter()
        disrupted_gamma, tune_rows = tune_disrupted_gamma(cfg, ds, model, sched)
        _write_rows(out / "tuning.csv", ("gamma", "mpve", "failures"), tune_rows)
        timing["tune_seconds"] = time.perf_counter() - t0
    disrupted_gamma = cfg.guidance.gamma if disrupted_gamma is None else disrupted_gamma

    # standard is always run at the full budget: its final gap is the budget-ladder target
    names = list(a.variants)
    budgets = sorted(set(a.ladder) | {cfg.schedule.ddim_steps})
    results, ladder, trial_rows, curve_rows = {}, [], [], []
    target_gap = None
    for name in (["standard"] if "standard" not in names else []) + names:
        t0 = time.perf_counter()
        gcfg, res = run_variant(cfg, ds, model, sched, name, disrupted_gamma, trials)
        summary = _summary(res)
        if name == "standard":
            target_gap = summary["final_gap"]
        if name not in names:
            continue
        summary["gamma"] = gcfg.gamma if name != "standard" else 0.0
        results[name] = summary
        for t, index, r in res:
            rep = r.report
            vals = [float("nan")] * 3 if rep is None else [rep.mpve, rep.mpjpe, rep.pa_mpjpe]
            trial_rows.append((name, t, index, *vals, r.final_gap, r.steps_to_threshold, r.failures))
        curve = np.mean([r.gap_curve for _, _, r in res], axis=0)
        curve_rows += [(name, i, int(k), float(c)) for i, (k, c) in enumerate(zip(res[0][2].k, curve))]
        timing[f"{name}_seconds"] = time.perf_counter() - t0

    for name in names:
        reached = None
        for b in budgets:
            if b == cfg.schedule.ddim_steps:
                s = results[name]
            else:
                _, res = run_variant(cfg, ds, model, schedule_from(cfg, b), name, disrupted_gamma, trials)
                s = _summary(res)
            ladder.append((name, b, s["final_gap"], s["mpve"]))
            if reached is None and np.isfinite(s["final_gap"]) and s["final_gap"] <= target_gap:
                reached = b
        results[name]["visited_steps"] = cfg.schedule.ddim_steps
        results[name]["steps_to_standard_gap"] = reached if reached is not None else -1

    cols = ("variant", "gamma", "visited_steps", "mpve", "mpjpe", "pa_mpjpe", "final_gap",
            "steps_to_threshold", "steps_to_standard_gap", "failures")  # fmt: skip
    _write_rows(out / "ablation.csv", cols, [(n, *(results[n][c] for c in cols[1:])) for n in names])
    _write_rows(
        out / "trials.csv",
        ("variant", "trial", "instance", "mpve", "mpjpe", "pa_mpjpe", "final_gap", "steps_to_threshold", "failures"),
        trial_rows,
    )
    _write_rows(out / "ladder.csv", ("variant", "ddim_steps", "final_gap", "mpve"), ladder)
    _write_rows(out / "gap_curves.csv", ("variant", "step_index", "k", "mean_D_k"), curve_rows)
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return {
        "output_dir": str(out),
        "standard_final_gap": target_gap,
        "disrupted_gamma": disrupted_gamma,
        "variants": results,
    }


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "ablate": cmd_ablate}
