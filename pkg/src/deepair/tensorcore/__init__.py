"""Minimal reverse-mode differentiable core for the Deep-AIR network."""

from .gradcheck import check_gradients, relative_error
from .ops import (BatchNormState, add, batchnorm, broadcast_to, concat, conv2d, embedding,
                  index, linear, lstm_cell, mean, mse_loss, mul, reduce_sum, relu, reshape,
                  scale, sigmoid, stack, sub, tanh)
from .params import ParameterSet, read_checkpoint, save_checkpoint, sgd_step
from .tensor import Tape, Tensor, active_tape, as_tensor, backward

__all__ = [
    "BatchNormState", "ParameterSet", "Tape", "Tensor", "active_tape", "add", "as_tensor",
    "backward", "batchnorm", "broadcast_to", "check_gradients", "concat", "conv2d",
    "embedding", "index", "linear", "lstm_cell", "mean", "mse_loss", "mul", "read_checkpoint",
    "reduce_sum", "relative_error", "relu", "reshape", "save_checkpoint", "scale", "sgd_step",
    "sigmoid", "stack", "sub", "tanh",
]
