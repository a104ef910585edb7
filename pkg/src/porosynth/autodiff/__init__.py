"""Minimal reverse-mode automatic differentiation over numpy arrays."""
from .checkpoint import load_checkpoint, save_checkpoint
from .conv import batchnorm, conv2d_complex_freq, conv3d, conv3d_transpose, mean_pool
from .optim import AdamState, adam_step, cosine_lr
from .tensor import (Tensor, add, add_bias, concat, div, exp, index, leaky_relu, log, matmul, mean,
                     clip_min, modulus, mul, power, real, relu, reshape, roll, sigmoid, softmax_channel,
                     softplus, stack, sub, tensor, transpose, tsum)

__all__ = [
    "Tensor", "tensor", "add", "add_bias", "concat", "div", "exp", "index", "leaky_relu", "log",
    "matmul", "mean", "clip_min", "modulus", "mul", "power", "real", "relu", "reshape", "roll", "sigmoid",
    "softmax_channel", "softplus", "stack", "sub", "transpose", "tsum", "batchnorm",
    "conv2d_complex_freq", "conv3d", "conv3d_transpose", "mean_pool", "AdamState", "adam_step",
    "cosine_lr", "save_checkpoint", "load_checkpoint",
]
