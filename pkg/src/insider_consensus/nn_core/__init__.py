"""Minimal numpy layers, losses and optimizers with explicit backward passes."""

from .checkpoint import CheckpointError, ModelParams, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .layers import GRU, Dense, DimensionError, Dropout, Embedding, GRUCell, Module, Sequential, mlp, sigmoid
from .losses import log_softmax, mse, softmax, weighted_cross_entropy
from .optim import Adam, LinearSchedule, TrainingError

__all__ = [
    "Adam", "CheckpointError", "Dense", "DimensionError", "Dropout", "Embedding", "GRU", "GRUCell",
    "LinearSchedule", "ModelParams", "Module", "Sequential", "TrainingError", "grad_check",
    "load_checkpoint", "log_softmax", "mlp", "mse", "save_checkpoint", "sigmoid", "softmax",
    "weighted_cross_entropy",
]
