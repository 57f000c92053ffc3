"""Dense 3D convolutional network engine with exact backpropagation."""

from .checkpoint import CorruptCheckpoint, load_checkpoint, save_checkpoint
from .network import (
    Conv3D,
    Flatten,
    FullyConnected,
    InputTooSmall,
    MaxPool3D,
    Network,
    NetworkSpec,
    ShapeMismatch,
    backward,
    build_fusion,
    build_single_modality,
    count_parameters,
    forward,
)
from .training import (
    EpochStats,
    EvalResult,
    NonFiniteLoss,
    SingleClassDataset,
    TrainConfig,
    evaluate,
    train,
)

__all__ = [
    "Conv3D",
    "MaxPool3D",
    "Flatten",
    "FullyConnected",
    "NetworkSpec",
    "Network",
    "InputTooSmall",
    "ShapeMismatch",
    "build_single_modality",
    "build_fusion",
    "count_parameters",
    "forward",
    "backward",
    "TrainConfig",
    "EpochStats",
    "EvalResult",
    "train",
    "evaluate",
    "SingleClassDataset",
    "NonFiniteLoss",
    "save_checkpoint",
    "load_checkpoint",
    "CorruptCheckpoint",
]
