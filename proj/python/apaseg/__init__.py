"""Python bindings for the apaseg segmentation library."""

from ._core import (
    ConfigError,
    ContractError,
    Network,
    TrainingError,
    cosine_lr,
    dice_score,
    gradcheck,
    hd95,
    load_volume,
    project,
    synthesize_case,
    synthesize_dataset,
    train,
    window_origins,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "Network",
    "TrainingError",
    "cosine_lr",
    "dice_score",
    "gradcheck",
    "hd95",
    "load_volume",
    "project",
    "synthesize_case",
    "synthesize_dataset",
    "train",
    "window_origins",
]

__version__ = "0.1.0"
