"""Self-supervised encoders with physics decoders, on a from-scratch autodiff engine."""

from .network import BASELINE, DENSE, Mlp, MlpSpec, build_mlp, encode
from .decoder import decode
from .training import (
    AdamState,
    GridSpec,
    StepSchedule,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    grid_search,
    lr_at_epoch,
    predict_params,
    reconstruct,
    train_ssl,
)

__all__ = [
    "BASELINE", "DENSE", "Mlp", "MlpSpec", "build_mlp", "encode", "decode", "AdamState", "GridSpec",
    "StepSchedule", "TrainConfig", "TrainingDiverged", "adam_step", "grid_search", "lr_at_epoch",
    "predict_params", "reconstruct", "train_ssl",
]
