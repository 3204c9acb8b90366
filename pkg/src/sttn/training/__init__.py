"""Data loading, optimization and the training loop."""
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .config import ConfigParseError, RunConfig, load_config, parse_config
from .data import BatchLoader, DataError, DatasetSource, load_dataset
from .optim import NonFiniteGradient, OptimState, adam_step, cosine_lr
from .trainer import EpochMetrics, TrainingDiverged, TrainResult, evaluate, train

__all__ = [
    "BatchLoader", "CheckpointError", "ConfigParseError", "DataError", "DatasetSource", "EpochMetrics",
    "NonFiniteGradient", "OptimState", "RunConfig", "TrainResult", "TrainingDiverged", "adam_step",
    "cosine_lr", "evaluate", "load_checkpoint", "load_config", "load_dataset", "parse_config",
    "read_checkpoint", "save_checkpoint", "train",
]
