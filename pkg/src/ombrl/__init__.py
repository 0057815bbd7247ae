"""Online model-based reinforcement learning for trajectory tracking.

Learns a neural dynamics model and a tracking policy together, one episode at
a time, using closed-loop analytical policy gradients through the learned
model and a low-rank preconditioned update.
"""
from .config import ConfigError, TrainerConfig, config_from_dict, load_config
from .model import DynamicsModel, ReplayBuffer, model_update
from .plants import PlantConfig, default_plant
from .policy import TrackingPolicy, closed_loop_gradient, policy_update, preconditioner_solve, rollout
from .trainer import Trainer, TrainingLog, evaluate, reference_suite, run_training

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DynamicsModel", "PlantConfig", "ReplayBuffer", "TrackingPolicy", "Trainer",
    "TrainerConfig", "TrainingLog", "closed_loop_gradient", "config_from_dict", "default_plant",
    "evaluate", "load_config", "model_update", "policy_update", "preconditioner_solve",
    "reference_suite", "rollout", "run_training",
]
