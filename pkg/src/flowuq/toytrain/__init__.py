"""Desk-scale training of a per-pixel network under the flow losses."""

from flowuq.toytrain.data import SyntheticScene, generate_scenes, resample_latent, stack_scenes
from flowuq.toytrain.model import ToyModel, forward, init_model, load_model, save_model
from flowuq.toytrain.train import (
    MergeModel,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    gradient_check,
    predict_merged,
    train,
    train_bootstrap_ensemble,
    train_merge_head,
    train_wta,
)

__all__ = [
    "SyntheticScene",
    "generate_scenes",
    "resample_latent",
    "stack_scenes",
    "ToyModel",
    "forward",
    "init_model",
    "load_model",
    "save_model",
    "MergeModel",
    "TrainConfig",
    "TrainingDiverged",
    "TrainResult",
    "gradient_check",
    "predict_merged",
    "train",
    "train_bootstrap_ensemble",
    "train_merge_head",
    "train_wta",
]
