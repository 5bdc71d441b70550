"""PIPMN audio classification: cepstral front end, autodiff MLP model, training and evaluation."""

from .autodiff import Parameter, Tensor, backward, grad_check, precision
from .model import PipConfig, PipmnModel, build_variant, forward, load_checkpoint, param_count, save_checkpoint

__all__ = [
    "Parameter", "Tensor", "backward", "grad_check", "precision",
    "PipConfig", "PipmnModel", "build_variant", "forward", "load_checkpoint",
    "param_count", "save_checkpoint",
]
__version__ = "0.1.0"
