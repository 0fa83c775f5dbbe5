"""From-scratch float64 neural toolkit: dense/normalization/dropout layers,
GRU cells with backpropagation through time, losses and Adam."""

from twinforge.nn.gradcheck import (
    check_model_gradients,
    numerical_gradient,
    relative_error,
)
from twinforge.nn.gru import BiGRU, GRUCell, bigru_forward, gru_step
from twinforge.nn.layers import Dense, Dropout, LayerNorm, dense_forward, softmax
from twinforge.nn.network import Sequential, backprop, compute_loss
from twinforge.nn.optim import AdamState, TrainConfig, optimize_step
from twinforge.nn.serialization import load_weights, save_weights

__all__ = [
    "AdamState",
    "BiGRU",
    "Dense",
    "Dropout",
    "GRUCell",
    "LayerNorm",
    "Sequential",
    "TrainConfig",
    "backprop",
    "bigru_forward",
    "check_model_gradients",
    "compute_loss",
    "dense_forward",
    "gru_step",
    "load_weights",
    "numerical_gradient",
    "optimize_step",
    "relative_error",
    "save_weights",
    "softmax",
]
