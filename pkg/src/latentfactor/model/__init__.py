"""Neural factor network: configuration, training, checkpoints and the estimator."""

from .checkpoint import Checkpoint, CheckpointError
from .config import ModelConfig, desk_config
from .estimator import LatentFactorModel
from .training import TrainingDiverged, train

__all__ = ["Checkpoint", "CheckpointError", "LatentFactorModel", "ModelConfig", "TrainingDiverged",
           "desk_config", "train"]
