"""Dual-encoder transformer with parallel cross-attention and per-modality influence tracing."""

from .model import ModelConfig, ModelParams, init_params
from .tensor import Tape, Tensor, backward, no_grad

__all__ = ["ModelConfig", "ModelParams", "init_params", "Tape", "Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
