"""Coarse-to-fine deep feature integration with asynchronous two-stream fusion, on a NumPy autodiff engine."""

from .config import Config, load_config
from .data import Dataset, generate
from .tensor import Tensor, no_grad

__all__ = ["Config", "Dataset", "Tensor", "generate", "load_config", "no_grad"]
__version__ = "0.1.0"
