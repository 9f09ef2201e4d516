"""Desk-scale liveness detection with shuffled style assembly."""

from .autodiff import Tensor, backward
from .model import ModelConfig, StyleAssemblyNet, tiny_config

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "ModelConfig", "StyleAssemblyNet",
           "tiny_config", "__version__"]
