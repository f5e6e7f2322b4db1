"""Energy-based transformer layers with verification oracles."""

from .tensor import Tape, Tensor

__all__ = ["Tape", "Tensor"]
__version__ = "0.1.0"
