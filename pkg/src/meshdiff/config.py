"""Run configuration: nested dataclasses, validation and JSON round-trip."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

VARIANTS = ("standard", "disrupted", "dat", "dat_no_activation", "single_pose_prior")
MODEL_KINDS = ("analytic", "denoiser")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ScheduleParams:
    K: int = 200
    alpha_first: float = 0.9999
    alpha_last: float = 1e-4
    eta: float = 0.0
    ddim_steps: int = 40


@dataclass
class GuidanceParams:
    r: float = 0.05
    gamma: float = 0.2
    gradient_mode: str = "full"
    num_chains: int = 25
    normalize_by_n: bool = False


@dataclass
class ModelParams:
    kind: str = "analytic"
    checkpoint: Optional[str] = None
    d_id: int = 16
    d_step: int = 15
    d_attn: int = 16
    d_ff: int = 64
    output: str = "velocity"
    target_mode: str = "epsilon"
    init_seed: int = 0


@dataclass
class DataParams:
    template: str = "biped"
    num_instances: int = 300
    pose_std: float = 0.3
    root_std: float = 0.15
    scale: float = 1.0
    context_noise: float = 0.01
    test_fraction: float = 0.2
    prior_sigma: float = 0.05
    prior_bias: float = 0.0
    prior_N: int = 25
    manifest: Optional[str] = None
    instance: int = 0


@dataclass
class TrainParams:
    lr: float = 1e-4
    batch_size: int = 32
    num_updates: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_v: float = 1.0
    lambda_j: float = 1.0
    lambda_n: float = 0.1
    lambda_e: float = 1.0


@dataclass
class AblationParams:
    variants: list = field(default_factory=lambda: list(VARIANTS))
    num_trials: int = 50
    ladder: list = field(default_factory=lambda: [2, 5, 10, 20])
    disrupted_gamma: Optional[float] = None
    tune_trials: int = 10


@dataclass
class RunConfig:
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    model: ModelParams = field(default_factory=ModelParams)
    data: DataParams = field(default_factory=DataParams)
    train: TrainParams = field(default_factory=TrainParams)
    ablation: AblationParams = field(default_factory=AblationParams)
    seed: int = 0
    output_dir: str = "runs/default"
    f_thresholds: list = field(default_factory=lambda: [0.05, 0.15])

    # -- validation -------------------------------------------------------

    def errors(self) -> list[str]:
        from .synthdata import TEMPLATES

        s, g, m, d, t, a = self.schedule, self.guidance, self.model, self.data, self.train, self.ablation
        checks = [
            (s.K >= 1, "schedule.K must be >= 1"),
            (0 < s.alpha_last < s.alpha_first <= 1, "schedule needs 0 < alpha_last < alpha_first <= 1"),
            (0 <= s.eta <= 1, "schedule.eta must lie in [0, 1]"),
            (1 <= s.ddim_steps <= s.K, "schedule.ddim_steps must lie in [1, K]"),
            (0 < g.r < 1, "guidance.r must lie in (0, 1)"),
            (g.gamma >= 0, "guidance.gamma must be >= 0"),
            (g.gradient_mode in ("full", "stop_gradient"), "guidance.gradient_mode must be full or stop_gradient"),
            (g.num_chains >= 1, "guidance.num_chains must be >= 1"),
            (m.kind in MODEL_KINDS, f"model.kind must be one of {MODEL_KINDS}"),
            (m.target_mode in ("epsilon", "step_difference"), "model.target_mode must be epsilon or step_difference"),
            (m.output in ("epsilon", "velocity"), "model.output must be epsilon or velocity"),
            (m.output == "epsilon" or m.target_mode == "epsilon", "model.output=velocity needs target_mode=epsilon"),
            (min(m.d_id, m.d_step, m.d_attn, m.d_ff) >= 1, "model dimensions must be >= 1"),
            (d.template in TEMPLATES, f"data.template must be one of {sorted(TEMPLATES)}"),
            (d.num_instances >= 1, "data.num_instances must be >= 1"),
            (d.scale > 0, "data.scale must be > 0"),
            (0 <= d.test_fraction < 1, "data.test_fraction must lie in [0, 1)"),
            (d.prior_sigma >= 0, "data.prior_sigma must be >= 0"),
            (d.prior_N >= 1, "data.prior_N must be >= 1"),
            (d.instance >= 0, "data.instance must be >= 0"),
            (t.lr >= 0, "train.lr must be >= 0"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.num_updates >= 0, "train.num_updates must be >= 0"),
            (min(t.lambda_v, t.lambda_j, t.lambda_n, t.lambda_e) >= 0, "loss weights must be >= 0"),
            (len(a.variants) > 0, "ablation.variants must not be empty"),
            (all(v in VARIANTS for v in a.variants), f"ablation.variants must be drawn from {VARIANTS}"),
            (a.num_trials >= 1, "ablation.num_trials must be >= 1"),
            (all(1 <= b <= s.K for b in a.ladder), "ablation.ladder budgets must lie in [1, K]"),
            (a.disrupted_gamma is None or a.disrupted_gamma >= 0, "ablation.disrupted_gamma must be >= 0"),
            (a.tune_trials >= 1, "ablation.tune_trials must be >= 1"),
            (len(self.f_thresholds) == 2 and min(self.f_thresholds) > 0, "f_thresholds needs two positive values"),
        ]
        return [msg for ok, msg in checks if not ok]

    def check(self) -> "RunConfig":
        errs = self.errors()
        if errs:
            raise ConfigError(errs)
        return self

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        errors = []
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            sub = _SECTIONS.get(f.name)
            if sub is not None:
                known = {x.name for x in dataclasses.fields(sub)}
                unknown = set(value) - known
                errors += [f"unknown field {f.name}.{u}" for u in sorted(unknown)]
                value = sub(**{k: v for k, v in value.items() if k in known})
            kwargs[f.name] = value
        errors += [f"unknown field {u}" for u in sorted(set(data) - {f.name for f in dataclasses.fields(cls)})]
        if errors:
            raise ConfigError(errors)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


_SECTIONS = {
    "schedule": ScheduleParams,
    "guidance": GuidanceParams,
    "model": ModelParams,
    "data": DataParams,
    "train": TrainParams,
    "ablation": AblationParams,
}


def flat_fields():
    """``(dotted_name, default)`` for every leaf field, used to build CLI flags."""
    base = RunConfig()
    for f in dataclasses.fields(RunConfig):
        value = getattr(base, f.name)
        if dataclasses.is_dataclass(value):
            for g in dataclasses.fields(value):
                yield f"{f.name}.{g.name}", getattr(value, g.name)
        else:
            yield f.name, value


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        node = data
        *path, leaf = dotted.split(".")
        for p in path:
            node = node[p]
        node[leaf] = value
    return RunConfig.from_dict(data)
