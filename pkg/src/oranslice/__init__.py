"""ORAN network slicing with an LSTM traffic forecaster and a distributed SAC allocator."""

from .config import SimConfig

__all__ = ["SimConfig"]
__version__ = "0.1.0"
