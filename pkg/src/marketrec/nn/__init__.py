"""From-scratch float64 neural kernel: layers, losses, SGD, gradient checks."""

from marketrec.nn.gradcheck import check_gradients, relative_error
from marketrec.nn.layers import (
    AttentionGate,
    BatchNorm,
    Conv1D,
    Dense,
    GRU,
    Layer,
    max_over_time,
    max_over_time_backward,
    sigmoid,
    softmax,
)
from marketrec.nn.losses import cosine_contrastive, mse, softmax_cross_entropy, weighted_bce
from marketrec.nn.optim import sgd_step

__all__ = [
    "AttentionGate",
    "BatchNorm",
    "Conv1D",
    "Dense",
    "GRU",
    "Layer",
    "check_gradients",
    "cosine_contrastive",
    "max_over_time",
    "max_over_time_backward",
    "mse",
    "relative_error",
    "sgd_step",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "weighted_bce",
]
