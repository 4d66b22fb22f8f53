"""Weakly-supervised crowd counting with a from-scratch patch transformer."""

from .model import ModelConfig, init_params, forward
from .ndtensor import Tensor, backward, grad_check

__all__ = ["ModelConfig", "init_params", "forward", "Tensor", "backward",
           "grad_check"]
__version__ = "0.1.0"
