"""Small numpy 1D-CNN engine: layers, losses, Adam, architectures, checkpoints."""

from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .layers import (BatchNorm1d, Conv1d, Dense, Dropout, Flatten, GlobalAvgPool, MaxPool1d,
                     ReLU, ResidualBlock, Sequential, conv1d_backward, conv1d_forward,
                     glorot_init)
from .losses import loss_mse, loss_softmax_xent, softmax
from .model import ARCHITECTURES, ArchitectureConfig, Model, build_architecture
from .optim import Adam, AdamState, adam_step

__all__ = [
    "ARCHITECTURES", "Adam", "AdamState", "ArchitectureConfig", "BatchNorm1d", "Conv1d", "Dense",
    "Dropout", "Flatten", "GlobalAvgPool", "MaxPool1d", "Model", "ModelCheckpoint", "ReLU",
    "ResidualBlock", "Sequential", "adam_step", "build_architecture", "conv1d_backward",
    "conv1d_forward", "glorot_init", "load_checkpoint", "loss_mse", "loss_softmax_xent",
    "save_checkpoint", "softmax",
]
