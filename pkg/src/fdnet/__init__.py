"""Numpy implementation of a flow/deformation recurrent nowcasting network."""

from .model import FDNet, ModelConfig
from .tensor import Tape, Tensor, backward

__all__ = ["FDNet", "ModelConfig", "Tape", "Tensor", "backward"]
__version__ = "0.1.0"
