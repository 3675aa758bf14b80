from .layers import Conv2D, Dense, Flatten, Layer, MaxPool2, ReLU, Reshape, Upsample2
from .network import (
    GradCheckReport,
    Network,
    StaleCacheError,
    Tape,
    gradient_check,
    mse_loss,
)
from .optim import Adam, NonFiniteGradientError, adam_step

__all__ = [
    "Adam",
    "Conv2D",
    "Dense",
    "Flatten",
    "GradCheckReport",
    "Layer",
    "MaxPool2",
    "Network",
    "NonFiniteGradientError",
    "ReLU",
    "Reshape",
    "StaleCacheError",
    "Tape",
    "Upsample2",
    "adam_step",
    "gradient_check",
    "mse_loss",
]
