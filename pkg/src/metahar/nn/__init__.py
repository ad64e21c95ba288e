"""Minimal numpy neural-network core: autodiff, layers, Adam, ParamSet."""
from .autodiff import Context, NonFiniteError, Tape, TapeConsumedError, Var, backward, forward
from .layers import (LSTM, Conv1d, Conv2d, Dense, Dropout, Lambda, Layer, Sequential, Softmax,
                     concat, conv1d, conv2d, dropout, linear, lstm, mean, relu, reshape, softmax,
                     softmax_array, take_last, transpose)
from .optim import AdamState, adam_step
from .params import IncongruentParamsError, ParamSet, load, mean as params_mean, save

__all__ = [
    "AdamState", "Context", "Conv1d", "Conv2d", "Dense", "Dropout", "IncongruentParamsError",
    "LSTM", "Lambda", "Layer", "NonFiniteError", "ParamSet", "Sequential", "Softmax", "Tape",
    "TapeConsumedError", "Var", "adam_step", "backward", "concat", "conv1d", "conv2d", "dropout",
    "forward", "linear", "load", "lstm", "mean", "params_mean", "relu", "reshape", "save",
    "softmax", "softmax_array", "take_last", "transpose",
]
