"""Multi-class trajectory prediction with learnable reference trajectories."""
from .config import RtmctConfig, small_config
from .model import PredictionSet, backward, forward, init_params, loss, loss_and_grad, predict
from .preprocess import AgentHistory, TrajectoryBatch, collate, prepare, preprocess
from .references import ReferenceTrajectorySet, generate_references
from .train import TrainSettings, load_checkpoint, save_checkpoint, train

__all__ = [
    "AgentHistory", "PredictionSet", "ReferenceTrajectorySet", "RtmctConfig", "TrainSettings", "TrajectoryBatch",
    "backward", "collate", "forward", "generate_references", "init_params", "load_checkpoint", "loss",
    "loss_and_grad", "predict", "prepare", "preprocess", "save_checkpoint", "small_config", "train",
]
