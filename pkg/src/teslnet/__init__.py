"""Segmentation stack: autodiff tensor core, windowed-attention encoder,
Bi-ConvLSTM skip fusion, training and evaluation tooling."""

from .tensor import GradTape, Param, Tensor
from .model import PRESETS, TeslNet, TeslNetConfig, load_weights, save_weights

__all__ = [
    "GradTape",
    "Param",
    "Tensor",
    "PRESETS",
    "TeslNet",
    "TeslNetConfig",
    "load_weights",
    "save_weights",
]
