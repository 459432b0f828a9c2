"""From-scratch numpy engine for the PAtt-Lite facial expression network."""

from .model import Model, ModelConfig, build_model, forward, load_weights, param_count, save_weights, set_trainable
from .tensor import Rng
from .train import TrainConfig, run_stage, run_two_stage

__all__ = [
    "Model",
    "ModelConfig",
    "Rng",
    "TrainConfig",
    "build_model",
    "forward",
    "load_weights",
    "param_count",
    "run_stage",
    "run_two_stage",
    "save_weights",
    "set_trainable",
]

__version__ = "0.1.0"
