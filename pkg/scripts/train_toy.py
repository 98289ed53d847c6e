#!/usr/bin/env python
"""Train the token denoiser on the chain template, then compare guided sampling
with the trained and the untrained network on held-out instances."""

import argparse

import numpy as np

from meshdiff.config import RunConfig, apply_overrides
from meshdiff.experiments import _summary, cmd_train, dataset_from, model_from, run_variant, schedule_from


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/train_toy")
    ap.add_argument("--updates", type=int, default=2000)
    ap.add_argument("--instances", type=int, default=100)
    ap.add_argument("--lr", type=float, default=1e-4)
    args = ap.parse_args()

    cfg = apply_overrides(
        RunConfig(),
        {
            "data.template": "chain",
            "data.num_instances": args.instances,
            "model.kind": "denoiser",
            "train.num_updates": args.updates,
            "train.lr": args.lr,
            "output_dir": args.out,
        },
    ).check()
    s = cmd_train(cfg)
    print(f"fixed-batch loss {s['initial_eval_loss']:.3f} -> {s['final_eval_loss']:.3f} "
          f"({100 * s['final_eval_loss'] / s['initial_eval_loss']:.1f}%), {s['num_params']} parameters")

    ds, sched = dataset_from(cfg), schedule_from(cfg)
    trained = model_from(apply_overrides(cfg, {"model.checkpoint": s["checkpoint"]}), ds, sched)
    fresh = model_from(cfg, ds, sched)
    trials = range(len(ds.test))
    for over in ({}, {"guidance.normalize_by_n": True}):
        c = apply_overrides(cfg, over)
        for variant in ("standard", "dat"):
            row = []
            for model in (trained, fresh):
                with np.errstate(all="ignore"):
                    _, res = run_variant(c, ds, model, sched, variant, None, trials)
                row.append(_summary(res)["mpve"])
            tag = "normalize_by_n" if over else "raw gamma"
            print(f"{tag:<15}{variant:<10} trained {row[0]:.4f}  untrained {row[1]:.4g}")


if __name__ == "__main__":
    main()
