"""Sentence-pair matching with dynamic re-reading, on a small numpy autodiff engine."""

from .models import DrrNet, LadraNet, ModelConfig, build_model
from .tensor import Tensor, backward, grad_check, no_grad

__all__ = ["DrrNet", "LadraNet", "ModelConfig", "Tensor", "backward", "build_model",
           "grad_check", "no_grad"]
__version__ = "0.1.0"
