from .aggregate import RefinementHead, aggregate_prediction
from .base import ScoreModel, has_vjp
from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import DenoiserConfig, TokenDenoiser, step_embedding
from .gaussian import AnalyticGaussianScore
from .losses import LossWeights, diffusion_loss, geometry_losses, total_loss
from .train import OptimConfig, StepDifferenceAdapter, train

__all__ = [
    "AnalyticGaussianScore",
    "DenoiserConfig",
    "LossWeights",
    "OptimConfig",
    "RefinementHead",
    "ScoreModel",
    "StepDifferenceAdapter",
    "TokenDenoiser",
    "aggregate_prediction",
    "diffusion_loss",
    "geometry_losses",
    "has_vjp",
    "load_checkpoint",
    "save_checkpoint",
    "step_embedding",
    "total_loss",
    "train",
]
